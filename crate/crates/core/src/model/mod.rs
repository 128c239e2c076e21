//! The two-branch interaction network.
//!
//! The layout branch reads the two-channel interaction pattern through eight
//! conv layers, global-average-pools it into `f1`, fuses the object embedding
//! and predicts prior logits `p1`. The visual branch is a bottleneck residual
//! net over the union crop; its head sees `f2`, the prior and the detector
//! features and predicts the final logits `p2`. Lateral 1x1 convs carry
//! residual-stage features into the layout branch after C2, C4 and C6.

mod config;
pub mod count;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{LateralDirection, LateralMode, ModelConfig, VariantSpec, VARIANT_NAMES};

use crate::tensor::sigmoid;
use crate::pairing::HoiPair;
use crate::tensor::checkpoint::{self, CheckpointError};
use crate::tensor::{Graph, LayerId, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("lateral connection {index}: {msg}")]
    Connection { index: usize, msg: String },
    #[error("unknown variant {name:?}; valid names: {valid}")]
    UnknownVariant { name: String, valid: String },
    #[error("missing input: {0}")]
    MissingInput(&'static str),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn conv_extent(x: usize, k: usize, stride: usize, pad: usize) -> usize {
    (x + 2 * pad - k) / stride + 1
}

/// Spatial side of the three layout receive ports (after C2, C4, C6).
pub fn layout_port_extents(resolution: usize) -> [usize; 3] {
    let c1 = conv_extent(resolution, 7, 2, 3);
    let p1 = (c1 - 2) / 2 + 1;
    let c4 = conv_extent(p1, 3, 2, 1);
    let c6 = conv_extent(c4, 3, 2, 1);
    [p1, c4, c6]
}

/// Spatial side of the three residual-stage taps.
pub fn visual_tap_extents(resolution: usize) -> [usize; 3] {
    let stem = conv_extent(resolution, 7, 2, 3);
    let r1 = (stem - 2) / 2 + 1;
    let r2 = conv_extent(r1, 3, 2, 1);
    let r3 = conv_extent(r2, 3, 2, 1);
    [r1, r2, r3]
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    conv: LayerId,
    bn: LayerId,
    stride: usize,
    pad: usize,
}

impl ConvBn {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let conv = store.add_conv(name, cin, cout, k, rng);
        let bn = store.add_batch_norm(format!("{name}.bn"), cout);
        Self {
            conv,
            bn,
            stride,
            pad: (k - 1) / 2,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, relu: bool) -> Result<Var> {
        let y = g.conv_layer(x, store.get(self.conv), self.stride, self.pad)?;
        let y = g.batch_norm_layer(y, store.get(self.bn))?;
        Ok(if relu { g.relu(y) } else { y })
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    reduce: ConvBn,
    mid: ConvBn,
    expand: ConvBn,
    shortcut: Option<ConvBn>,
}

impl Bottleneck {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let r = self.reduce.forward(g, store, x, true)?;
        let r = self.mid.forward(g, store, r, true)?;
        let r = self.expand.forward(g, store, r, false)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, store, x, false)?,
            None => x,
        };
        let sum = g.add(r, skip)?;
        Ok(g.relu(sum))
    }
}

#[derive(Debug, Clone, Copy)]
struct Head {
    fc1: LayerId,
    fc2: LayerId,
    out: LayerId,
}

impl Head {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        [h1, h2]: [usize; 2],
        p: usize,
    ) -> Self {
        Self {
            fc1: store.add_linear(format!("{name}.fc1"), input, h1, rng),
            fc2: store.add_linear(format!("{name}.fc2"), h1, h2, rng),
            out: store.add_linear(format!("{name}.out"), h2, p, rng),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = g.linear_layer(x, store.get(self.fc1))?;
        let h = g.relu(h);
        let h = g.linear_layer(h, store.get(self.fc2))?;
        let h = g.relu(h);
        Ok(g.linear_layer(h, store.get(self.out))?)
    }
}

#[derive(Debug, Clone, Copy)]
struct Lateral {
    index: usize,
    conv: LayerId,
    pad: usize,
}

/// Stage features exchanged over lateral connections, indexed by connection.
pub type Taps = [Var; 3];

/// Inputs of a batch of pairs, stacked along the leading axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[N, 2, R, R]`
    pub ip: Tensor,
    /// `[N, 3, R, R]`
    pub crop: Tensor,
    /// `[N, E]`
    pub w_o: Tensor,
    /// `[N, D]`
    pub f_h: Tensor,
    /// `[N, D]`
    pub f_o: Tensor,
    /// `[N, P]`, present when every pair carries a target.
    pub targets: Option<Tensor>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&HoiPair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let ips: Vec<&Tensor> = pairs.iter().map(|p| p.ip.as_tensor()).collect();
        let crops: Vec<&Tensor> = pairs.iter().map(|p| &p.union_crop).collect();
        let rows = |f: &dyn Fn(&HoiPair) -> &[f64]| -> Result<Tensor> {
            let width = f(pairs[0]).len();
            let mut data = Vec::with_capacity(width * pairs.len());
            for p in pairs {
                let r = f(p);
                if r.len() != width {
                    return Err(TensorError::Shape {
                        op: "batch",
                        expected: vec![width],
                        got: vec![r.len()],
                    }
                    .into());
                }
                data.extend_from_slice(r);
            }
            Ok(Tensor::new(vec![pairs.len(), width], data)?)
        };
        let targets = if pairs.iter().all(|p| p.target.is_some()) {
            Some(rows(&|p| p.target.as_deref().unwrap_or(&[]))?)
        } else {
            None
        };
        Ok(Self {
            ip: Tensor::stack(&ips)?,
            crop: Tensor::stack(&crops)?,
            w_o: rows(&|p| &p.w_o)?,
            f_h: rows(&|p| &p.human.feature)?,
            f_o: rows(&|p| &p.object.feature)?,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.ip.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Result of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    /// Layout prior logits; absent without priming.
    pub p1: Option<Var>,
    /// Final logits.
    pub p2: Var,
    pub f1: Var,
    pub f2: Var,
    /// Number of lateral convs applied.
    pub lateral_calls: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    variant: VariantSpec,
    store: ParamStore,
    layout_convs: Vec<ConvBn>,
    layout_head: Option<Head>,
    visual_stem: ConvBn,
    visual_stages: Vec<Vec<Bottleneck>>,
    visual_head: Head,
    visual_head_widths: [usize; 2],
    laterals: Vec<Lateral>,
}

impl Model {
    /// Builds and randomly initializes a model.
    pub fn build(config: &ModelConfig, variant: &VariantSpec, init_seed: u64) -> Result<Self> {
        config.validate()?;
        if ![1, 3].contains(&variant.lateral_kernel) {
            return Err(ModelError::Config(format!(
                "lateral kernel must be 1 or 3, got {}",
                variant.lateral_kernel
            )));
        }
        let ports = layout_port_extents(config.resolution);
        let taps = visual_tap_extents(config.resolution);
        for index in variant.active_connections() {
            if ports[index - 1] != taps[index - 1] {
                return Err(ModelError::Connection {
                    index,
                    msg: format!(
                        "layout port is {0}x{0} but visual tap is {1}x{1}",
                        ports[index - 1],
                        taps[index - 1]
                    ),
                });
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut store = ParamStore::new();
        let rng = &mut rng;

        let lc = config.layout_channels;
        let spec = [(7, 2), (3, 1), (1, 1), (3, 2), (1, 1), (3, 2), (1, 1), (3, 2)];
        let mut cin = 2;
        let mut layout_convs = Vec::with_capacity(8);
        for (i, &(k, s)) in spec.iter().enumerate() {
            let name = format!("layout.c{}", i + 1);
            layout_convs.push(ConvBn::new(&mut store, rng, &name, cin, lc[i], k, s));
            cin = lc[i];
        }

        let visual_stem = ConvBn::new(&mut store, rng, "visual.stem", 3, config.visual_stem, 7, 2);
        let mut cin = config.visual_stem;
        let mut visual_stages = Vec::new();
        for (s, &cout) in config.visual_stages.iter().enumerate() {
            let mid = (cout / 4).max(1);
            let mut blocks = Vec::new();
            for b in 0..config.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let name = format!("visual.res{}.{}", s + 1, b);
                let reduce = ConvBn::new(&mut store, rng, &format!("{name}.reduce"), cin, mid, 1, 1);
                let midc = ConvBn::new(&mut store, rng, &format!("{name}.conv"), mid, mid, 3, stride);
                let expand = ConvBn::new(&mut store, rng, &format!("{name}.expand"), mid, cout, 1, 1);
                let shortcut = (cin != cout || stride != 1).then(|| {
                    ConvBn::new(&mut store, rng, &format!("{name}.shortcut"), cin, cout, 1, stride)
                });
                blocks.push(Bottleneck {
                    reduce,
                    mid: midc,
                    expand,
                    shortcut,
                });
                cin = cout;
            }
            visual_stages.push(blocks);
        }

        let mut laterals = Vec::new();
        for index in variant.active_connections() {
            let (src, dst) = count::lateral_channels(config, variant, index);
            let cin = match variant.laterals {
                LateralMode::Concat => src + dst,
                _ => src,
            };
            let conv = store.add_conv(format!("lateral{index}"), cin, dst, variant.lateral_kernel, rng);
            laterals.push(Lateral {
                index,
                conv,
                pad: (variant.lateral_kernel - 1) / 2,
            });
        }

        let layout_head = variant.priming.then(|| {
            Head::new(
                &mut store,
                rng,
                "layout.head",
                count::layout_head_input(config, variant),
                config.fc_hidden,
                config.num_predicates,
            )
        });
        let widths = count::visual_head_widths(config, variant);
        let visual_head = Head::new(
            &mut store,
            rng,
            "visual.head",
            count::visual_head_input(config, variant),
            widths,
            config.num_predicates,
        );

        Ok(Self {
            config: config.clone(),
            variant: variant.clone(),
            store,
            layout_convs,
            layout_head,
            visual_stem,
            visual_stages,
            visual_head,
            visual_head_widths: widths,
            laterals,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> &VariantSpec {
        &self.variant
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn visual_head_widths(&self) -> [usize; 2] {
        self.visual_head_widths
    }

    /// `(connection index, kernel side)` of every lateral conv.
    pub fn lateral_layers(&self) -> Vec<(usize, usize)> {
        self.laterals
            .iter()
            .map(|l| (l.index, self.store.get(l.conv).kernel().0))
            .collect()
    }

    /// Stable 64-bit hash of the config and variant.
    pub fn config_hash(&self) -> u64 {
        config_hash(&self.config, &self.variant)
    }

    fn lateral(&self, index: usize) -> Option<&Lateral> {
        self.laterals.iter().find(|l| l.index == index)
    }

    fn apply_lateral(
        &self,
        g: &mut Graph,
        index: usize,
        target: Var,
        source: Var,
        calls: &mut usize,
    ) -> Result<Var> {
        let Some(lat) = self.lateral(index) else {
            return Ok(target);
        };
        *calls += 1;
        let layer = self.store.get(lat.conv);
        let out = match self.variant.laterals {
            LateralMode::Concat => {
                let cat = g.concat(&[target, source])?;
                g.conv_layer(cat, layer, 1, lat.pad)?
            }
            _ => {
                let moved = g.conv_layer(source, layer, 1, lat.pad)?;
                g.add(target, moved)?
            }
        };
        Ok(out)
    }

    /// Layout convolutions. Returns `(f1, port activations)`; `incoming` taps
    /// are merged after C2, C4 and C6 for active connections.
    pub fn layout_base(
        &self,
        g: &mut Graph,
        ip: Var,
        incoming: Option<&Taps>,
        calls: &mut usize,
    ) -> Result<(Var, Taps)> {
        let (x, ports) = self.layout_trunk(g, ip, incoming, calls)?;
        Ok((g.global_avg_pool(x)?, ports))
    }

    /// Every stage output of the layout branch without laterals: the three
    /// ports, the last conv map and the pooled feature.
    pub fn layout_stages(&self, g: &mut Graph, ip: Var) -> Result<[Var; 5]> {
        let mut calls = 0;
        let (x, p) = self.layout_trunk(g, ip, None, &mut calls)?;
        let f1 = g.global_avg_pool(x)?;
        Ok([p[0], p[1], p[2], x, f1])
    }

    fn layout_trunk(
        &self,
        g: &mut Graph,
        ip: Var,
        incoming: Option<&Taps>,
        calls: &mut usize,
    ) -> Result<(Var, Taps)> {
        let s = &self.store;
        let c = &self.layout_convs;
        let x = c[0].forward(g, s, ip, true)?;
        let x = g.max_pool(x, 2, 2)?;
        let mut x = c[1].forward(g, s, x, true)?;
        let mut ports = [x; 3];
        for stage in 0..3 {
            if let Some(inc) = incoming {
                x = self.apply_lateral(g, stage + 1, x, inc[stage], calls)?;
            }
            ports[stage] = x;
            if stage < 2 {
                x = c[2 + 2 * stage].forward(g, s, x, true)?;
                x = c[3 + 2 * stage].forward(g, s, x, true)?;
            }
        }
        x = c[6].forward(g, s, x, true)?;
        x = c[7].forward(g, s, x, true)?;
        Ok((x, ports))
    }

    pub fn layout_head(&self, g: &mut Graph, f1: Var, w_o: Option<Var>) -> Result<Var> {
        let head = self
            .layout_head
            .as_ref()
            .ok_or(ModelError::MissingInput("layout head (variant has no priming)"))?;
        let input = if self.variant.use_w_o {
            let w = w_o.ok_or(ModelError::MissingInput("w_o"))?;
            g.concat(&[f1, w])?
        } else {
            f1
        };
        head.forward(g, &self.store, input)
    }

    /// Residual base. Returns `(f2, stage taps)`; `incoming` layout ports are
    /// merged after each of the first three stages.
    pub fn visual_base(
        &self,
        g: &mut Graph,
        crop: Var,
        incoming: Option<&Taps>,
        calls: &mut usize,
    ) -> Result<(Var, Taps)> {
        let s = &self.store;
        let x = self.visual_stem.forward(g, s, crop, true)?;
        let mut x = g.max_pool(x, 2, 2)?;
        let mut taps = [x; 3];
        for (i, blocks) in self.visual_stages.iter().enumerate() {
            for b in blocks {
                x = b.forward(g, s, x)?;
            }
            if i < 3 {
                taps[i] = x;
                if let Some(inc) = incoming {
                    x = self.apply_lateral(g, i + 1, x, inc[i], calls)?;
                }
            }
        }
        let f2 = g.global_avg_pool(x)?;
        Ok((f2, taps))
    }

    /// Final head over `concat(f2, prior, f_h, f_o)` restricted to the enabled parts.
    pub fn visual_head(
        &self,
        g: &mut Graph,
        f2: Var,
        prior: Var,
        f_h: Option<Var>,
        f_o: Option<Var>,
    ) -> Result<Var> {
        let mut parts = vec![f2, prior];
        if self.variant.use_fh_fo {
            parts.push(f_h.ok_or(ModelError::MissingInput("f_h"))?);
            parts.push(f_o.ok_or(ModelError::MissingInput("f_o"))?);
        }
        let input = g.concat(&parts)?;
        let expected = count::visual_head_input(&self.config, &self.variant);
        if g.value(input).shape()[1] != expected {
            return Err(TensorError::Shape {
                op: "visual_head",
                expected: vec![g.value(input).shape()[0], expected],
                got: g.value(input).shape().to_vec(),
            }
            .into());
        }
        self.visual_head.forward(g, &self.store, input)
    }

    /// Layout branch end to end: `(f1, p1)`; `p1` is absent without priming.
    pub fn layout_forward(
        &self,
        g: &mut Graph,
        ip: Var,
        w_o: Option<Var>,
        taps: Option<&Taps>,
    ) -> Result<(Var, Option<Var>)> {
        let needs_taps = self.variant.has_laterals()
            && self.variant.direction == LateralDirection::VisualToLayout;
        if needs_taps && taps.is_none() {
            return Err(ModelError::MissingInput("visual taps for lateral connections"));
        }
        let mut calls = 0;
        let incoming = if needs_taps { taps } else { None };
        let (f1, _) = self.layout_base(g, ip, incoming, &mut calls)?;
        let p1 = match self.layout_head {
            Some(_) => Some(self.layout_head(g, f1, w_o)?),
            None => None,
        };
        Ok((f1, p1))
    }

    /// Visual branch end to end: `(p2, taps)`.
    pub fn visual_forward(
        &self,
        g: &mut Graph,
        crop: Var,
        prior: Var,
        f_h: Option<Var>,
        f_o: Option<Var>,
    ) -> Result<(Var, Taps)> {
        let mut calls = 0;
        let (f2, taps) = self.visual_base(g, crop, None, &mut calls)?;
        let p2 = self.visual_head(g, f2, prior, f_h, f_o)?;
        Ok((p2, taps))
    }

    /// Runs both branches with the variant's wiring.
    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<Outputs> {
        let ip = g.constant(batch.ip.clone());
        let crop = g.constant(batch.crop.clone());
        let w_o = g.constant(batch.w_o.clone());
        let f_h = g.constant(batch.f_h.clone());
        let f_o = g.constant(batch.f_o.clone());
        self.forward_vars(g, ip, crop, w_o, f_h, f_o)
    }

    pub fn forward_vars(
        &self,
        g: &mut Graph,
        ip: Var,
        crop: Var,
        w_o: Var,
        f_h: Var,
        f_o: Var,
    ) -> Result<Outputs> {
        let mut calls = 0;
        let (f1, f2) = match (self.variant.has_laterals(), self.variant.direction) {
            (true, LateralDirection::VisualToLayout) => {
                let (f2, taps) = self.visual_base(g, crop, None, &mut calls)?;
                let (f1, _) = self.layout_base(g, ip, Some(&taps), &mut calls)?;
                (f1, f2)
            }
            (true, LateralDirection::LayoutToVisual) => {
                let (f1, ports) = self.layout_base(g, ip, None, &mut calls)?;
                let (f2, _) = self.visual_base(g, crop, Some(&ports), &mut calls)?;
                (f1, f2)
            }
            (false, _) => {
                let (f2, _) = self.visual_base(g, crop, None, &mut calls)?;
                let (f1, _) = self.layout_base(g, ip, None, &mut calls)?;
                (f1, f2)
            }
        };
        let p1 = if self.variant.priming {
            Some(self.layout_head(g, f1, Some(w_o))?)
        } else {
            None
        };
        let prior = p1.unwrap_or(f1);
        let p2 = self.visual_head(g, f2, prior, Some(f_h), Some(f_o))?;
        Ok(Outputs {
            p1,
            p2,
            f1,
            f2,
            lateral_calls: calls,
        })
    }

    /// Folds a finished train-mode tape's batch-norm statistics into the model.
    pub fn apply_running_updates(&mut self, g: &Graph) {
        self.store.apply_running_updates(g.running_updates());
    }

    pub fn write_checkpoint<W: std::io::Write>(&self, w: W) -> Result<()> {
        Ok(checkpoint::write_checkpoint(w, &self.store, self.config_hash())?)
    }

    pub fn read_checkpoint<R: std::io::Read>(&mut self, r: R) -> Result<()> {
        let hash = self.config_hash();
        Ok(checkpoint::load_checkpoint(r, &mut self.store, hash)?)
    }
}

/// First eight bytes (little endian) of SHA-256 over the JSON of config and variant.
pub fn config_hash(config: &ModelConfig, variant: &VariantSpec) -> u64 {
    crate::seed::digest64(&serde_json::to_vec(&(config, variant)).expect("config serializes"))
}

/// Scored triplet candidate `(triplet id, score)`.
pub type ScoredTriplet = (usize, f64);

/// Triplet class id of `(predicate, object class)`.
pub fn triplet_id(predicate: usize, object_class: usize, num_objects: usize) -> usize {
    predicate * num_objects + object_class
}

/// `(predicate, object class)` of a triplet id.
pub fn split_triplet(id: usize, num_objects: usize) -> (usize, usize) {
    (id / num_objects, id % num_objects)
}

/// One triplet per predicate with score `s_h * s_o * sigmoid(logit)`.
pub fn compose_triplets(
    p2: &[f64],
    object_class: usize,
    num_objects: usize,
    s_h: f64,
    s_o: f64,
) -> Vec<ScoredTriplet> {
    p2.iter()
        .enumerate()
        .map(|(p, &z)| (triplet_id(p, object_class, num_objects), s_h * s_o * sigmoid(z)))
        .collect()
}
