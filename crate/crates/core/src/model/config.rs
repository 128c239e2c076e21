use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture widths and input sizes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the square interaction pattern and union crop.
    pub resolution: usize,
    pub num_predicates: usize,
    pub num_objects: usize,
    pub embed_dim: usize,
    pub det_feat_dim: usize,
    /// Output channels of the eight layout convolutions C1..C8.
    pub layout_channels: [usize; 8],
    pub visual_stem: usize,
    /// Output channels of each residual stage; at least three.
    pub visual_stages: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Hidden sizes of the two fully-connected layers in each head.
    pub fc_hidden: [usize; 2],
}

impl ModelConfig {
    /// Full-width network on 224x224 inputs.
    pub fn full(num_predicates: usize, num_objects: usize) -> Self {
        Self {
            resolution: 224,
            num_predicates,
            num_objects,
            embed_dim: 300,
            det_feat_dim: 2048,
            layout_channels: [64, 256, 128, 512, 256, 1024, 512, 2048],
            visual_stem: 64,
            visual_stages: vec![256, 512, 1024],
            blocks_per_stage: 2,
            fc_hidden: [1024, 512],
        }
    }

    /// Channel widths divided by eight, 64x64 inputs.
    pub fn desk(num_predicates: usize, num_objects: usize) -> Self {
        Self {
            resolution: 64,
            num_predicates,
            num_objects,
            embed_dim: 32,
            det_feat_dim: 32,
            layout_channels: [8, 32, 16, 64, 32, 128, 64, 256],
            visual_stem: 8,
            visual_stages: vec![32, 64, 128],
            blocks_per_stage: 2,
            fc_hidden: [128, 64],
        }
    }

    /// Sixteenth-width network on 32x32 inputs, one block per stage.
    pub fn tiny(num_predicates: usize, num_objects: usize) -> Self {
        Self {
            resolution: 32,
            num_predicates,
            num_objects,
            embed_dim: 16,
            det_feat_dim: 16,
            layout_channels: [4, 16, 8, 32, 16, 64, 32, 128],
            visual_stem: 4,
            visual_stages: vec![16, 32, 64],
            blocks_per_stage: 1,
            fc_hidden: [64, 32],
        }
    }

    pub fn preset(name: &str, num_predicates: usize, num_objects: usize) -> Option<Self> {
        match name {
            "full" => Some(Self::full(num_predicates, num_objects)),
            "desk" => Some(Self::desk(num_predicates, num_objects)),
            "tiny" => Some(Self::tiny(num_predicates, num_objects)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("resolution", self.resolution),
            ("num_predicates", self.num_predicates),
            ("num_objects", self.num_objects),
            ("embed_dim", self.embed_dim),
            ("det_feat_dim", self.det_feat_dim),
            ("visual_stem", self.visual_stem),
            ("blocks_per_stage", self.blocks_per_stage),
            ("fc_hidden[0]", self.fc_hidden[0]),
            ("fc_hidden[1]", self.fc_hidden[1]),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.layout_channels.contains(&0) || self.visual_stages.contains(&0) {
            return Err(ModelError::Config("channel widths must be positive".into()));
        }
        if !(3..=4).contains(&self.visual_stages.len()) {
            return Err(ModelError::Config(format!(
                "visual branch needs 3 or 4 residual stages, got {}",
                self.visual_stages.len()
            )));
        }
        if self.resolution < 32 {
            return Err(ModelError::Config(format!(
                "resolution {} is below the minimum of 32",
                self.resolution
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LateralMode {
    Add,
    Concat,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LateralDirection {
    #[serde(rename = "v-to-l")]
    VisualToLayout,
    #[serde(rename = "l-to-v")]
    LayoutToVisual,
}

/// One architecture variant of the ablation study.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    /// Feed layout logits into the visual head and train them with their own loss.
    pub priming: bool,
    pub laterals: LateralMode,
    pub lateral_kernel: usize,
    pub direction: LateralDirection,
    /// Which of the three stage connections exist (index 0 is Res-1).
    pub connections: [bool; 3],
    pub use_w_o: bool,
    pub use_fh_fo: bool,
    /// Widen the visual head to match the parameter count of the same model
    /// with detector features.
    pub enlarged_head: bool,
}

pub const VARIANT_NAMES: [&str; 14] = [
    "standard",
    "np",
    "nc",
    "nl",
    "concat",
    "3x3add",
    "conn1",
    "conn2",
    "conn3",
    "ltov",
    "no-wo",
    "no-fhfo",
    "standard-larger",
    "concat-larger",
];

impl VariantSpec {
    pub fn standard() -> Self {
        Self {
            name: "standard".into(),
            priming: true,
            laterals: LateralMode::Add,
            lateral_kernel: 1,
            direction: LateralDirection::VisualToLayout,
            connections: [true; 3],
            use_w_o: true,
            use_fh_fo: true,
            enlarged_head: false,
        }
    }

    pub fn from_name(name: &str) -> Result<Self, ModelError> {
        let lower = name.to_ascii_lowercase();
        let mut v = Self::standard();
        match lower.as_str() {
            "standard" => {}
            "np" => v.priming = false,
            "nc" => {
                v.priming = false;
                v.laterals = LateralMode::None;
            }
            "nl" => v.laterals = LateralMode::None,
            "concat" => v.laterals = LateralMode::Concat,
            "3x3add" => v.lateral_kernel = 3,
            "conn1" => v.connections = [true, false, false],
            "conn2" => v.connections = [false, true, false],
            "conn3" => v.connections = [false, false, true],
            "ltov" => v.direction = LateralDirection::LayoutToVisual,
            "no-wo" => v.use_w_o = false,
            "no-fhfo" => v.use_fh_fo = false,
            "standard-larger" => {
                v.use_fh_fo = false;
                v.enlarged_head = true;
            }
            "concat-larger" => {
                v.laterals = LateralMode::Concat;
                v.use_fh_fo = false;
                v.enlarged_head = true;
            }
            _ => {
                return Err(ModelError::UnknownVariant {
                    name: name.to_string(),
                    valid: VARIANT_NAMES.join(", "),
                })
            }
        }
        v.name = lower;
        Ok(v)
    }

    pub fn has_laterals(&self) -> bool {
        self.laterals != LateralMode::None && self.connections.iter().any(|&c| c)
    }

    /// Connection indices (1-based) that carry a lateral conv.
    pub fn active_connections(&self) -> Vec<usize> {
        if self.laterals == LateralMode::None {
            return Vec::new();
        }
        (0..3).filter(|&i| self.connections[i]).map(|i| i + 1).collect()
    }

    /// The variant an enlarged head is sized against.
    pub fn reference_for_enlarged(&self) -> Self {
        let mut r = self.clone();
        r.use_fh_fo = true;
        r.enlarged_head = false;
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_named_variant_parses() {
        for name in VARIANT_NAMES {
            let v = VariantSpec::from_name(name).unwrap();
            assert_eq!(v.name, name);
        }
        let err = VariantSpec::from_name("bogus").unwrap_err().to_string();
        assert!(err.contains("standard") && err.contains("concat-larger"), "{err}");
    }

    #[test]
    fn standard_matches_invariant() {
        let v = VariantSpec::standard();
        assert!(v.priming && v.use_w_o && v.use_fh_fo && !v.enlarged_head);
        assert_eq!(v.laterals, LateralMode::Add);
        assert_eq!(v.lateral_kernel, 1);
        assert_eq!(v.direction, LateralDirection::VisualToLayout);
        assert_eq!(v.active_connections(), vec![1, 2, 3]);
    }

    #[test]
    fn variant_flags() {
        assert!(!VariantSpec::from_name("np").unwrap().priming);
        assert!(!VariantSpec::from_name("nc").unwrap().has_laterals());
        assert!(VariantSpec::from_name("nl").unwrap().active_connections().is_empty());
        assert_eq!(VariantSpec::from_name("conn2").unwrap().active_connections(), vec![2]);
        let larger = VariantSpec::from_name("concat-larger").unwrap();
        assert_eq!(larger.laterals, LateralMode::Concat);
        assert!(!larger.use_fh_fo && larger.enlarged_head);
        assert_eq!(larger.reference_for_enlarged().laterals, LateralMode::Concat);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::tiny(6, 4).validate().is_ok());
        let mut c = ModelConfig::tiny(0, 4);
        assert!(c.validate().is_err());
        c.num_predicates = 6;
        c.visual_stages = vec![8, 8];
        assert!(c.validate().is_err());
    }
}
