//! Closed-form parameter counts, independent of the layer construction code.

use super::config::{LateralDirection, LateralMode, ModelConfig, VariantSpec};

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

fn bn(c: usize) -> usize {
    2 * c
}

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

fn head(input: usize, h1: usize, h2: usize, p: usize) -> usize {
    linear(input, h1) + linear(h1, h2) + linear(h2, p)
}

pub fn layout_base_params(c: &ModelConfig) -> usize {
    let ch = c.layout_channels;
    let kernels = [7, 3, 1, 3, 1, 3, 1, 3];
    let mut cin = 2;
    let mut total = 0;
    for (i, &cout) in ch.iter().enumerate() {
        total += conv(cin, cout, kernels[i]) + bn(cout);
        cin = cout;
    }
    total
}

pub fn visual_base_params(c: &ModelConfig) -> usize {
    let mut total = conv(3, c.visual_stem, 7) + bn(c.visual_stem);
    let mut cin = c.visual_stem;
    for (s, &cout) in c.visual_stages.iter().enumerate() {
        let mid = (cout / 4).max(1);
        for b in 0..c.blocks_per_stage {
            total += conv(cin, mid, 1) + bn(mid);
            total += conv(mid, mid, 3) + bn(mid);
            total += conv(mid, cout, 1) + bn(cout);
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            if cin != cout || stride != 1 {
                total += conv(cin, cout, 1) + bn(cout);
            }
            cin = cout;
        }
    }
    total
}

/// `(source channels, target channels)` of lateral connection `index` (1-based).
pub fn lateral_channels(c: &ModelConfig, v: &VariantSpec, index: usize) -> (usize, usize) {
    let layout = c.layout_channels[2 * index - 1];
    let visual = c.visual_stages[index - 1];
    match v.direction {
        LateralDirection::VisualToLayout => (visual, layout),
        LateralDirection::LayoutToVisual => (layout, visual),
    }
}

pub fn lateral_params(c: &ModelConfig, v: &VariantSpec) -> usize {
    v.active_connections()
        .into_iter()
        .map(|i| {
            let (src, dst) = lateral_channels(c, v, i);
            match v.laterals {
                LateralMode::Add => conv(src, dst, v.lateral_kernel),
                LateralMode::Concat => conv(src + dst, dst, v.lateral_kernel),
                LateralMode::None => 0,
            }
        })
        .sum()
}

pub fn layout_head_input(c: &ModelConfig, v: &VariantSpec) -> usize {
    c.layout_channels[7] + if v.use_w_o { c.embed_dim } else { 0 }
}

pub fn visual_head_input(c: &ModelConfig, v: &VariantSpec) -> usize {
    let f2 = *c.visual_stages.last().expect("validated stages");
    let prior = if v.priming {
        c.num_predicates
    } else {
        c.layout_channels[7]
    };
    let det = if v.use_fh_fo { 2 * c.det_feat_dim } else { 0 };
    f2 + prior + det
}

fn count_with_visual_head(c: &ModelConfig, v: &VariantSpec, h1: usize, h2: usize) -> usize {
    let mut total = layout_base_params(c) + visual_base_params(c) + lateral_params(c, v);
    if v.priming {
        total += head(layout_head_input(c, v), c.fc_hidden[0], c.fc_hidden[1], c.num_predicates);
    }
    total + head(visual_head_input(c, v), h1, h2, c.num_predicates)
}

/// Hidden sizes of the visual head. Enlarged heads are widened until the total
/// count is as close as possible to the reference variant's.
pub fn visual_head_widths(c: &ModelConfig, v: &VariantSpec) -> [usize; 2] {
    let [f1, f2] = c.fc_hidden;
    if !v.enlarged_head {
        return [f1, f2];
    }
    let target = param_count(c, &v.reference_for_enlarged()) as i64;
    let mut best = ([f1, f2], i64::MAX);
    for h1 in f1..=4 * f1 {
        let centre = (h1 * f2 + f1 / 2) / f1;
        for h2 in centre.saturating_sub(3).max(f2)..=centre + 3 {
            let diff = (count_with_visual_head(c, v, h1, h2) as i64 - target).abs();
            if diff < best.1 {
                best = ([h1, h2], diff);
            }
        }
    }
    best.0
}

/// Trainable parameters of the model `build_model(c, v)` would construct.
pub fn param_count(c: &ModelConfig, v: &VariantSpec) -> usize {
    let [h1, h2] = visual_head_widths(c, v);
    count_with_visual_head(c, v, h1, h2)
}
