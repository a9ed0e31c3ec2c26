//! The tracker network: two-stream backbone, fusion, and the heads.

mod backbone;
mod head;

pub use backbone::{Backbone, BackboneConfig, StreamParams};
pub use head::{
    argmax, box_column, center_cell, classify, decode_box_var, feature_columns, filter_objective,
    gaussian_labels, gaussian_map, hinge_residual, hinge_residual_var, learn_filter, loss_bbox,
    loss_cls, loss_total, regress_bbox, regression_deltas, FilterConfig, FilterSample, HeadParams,
    LabelConfig,
};

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionConfig;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::fusion::{CmimConfig, FusionMode, FusionNet};
use crate::numcore::{read_checkpoint, write_checkpoint, ParamId, ParamStore, Session, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fusion_mode: FusionMode,
    /// `cmim.channels` must equal the backbone output width.
    pub cmim: CmimConfig,
    pub labels: LabelConfig,
    pub filter: FilterConfig,
    /// Side of the square input patches.
    pub patch_size: usize,
}

impl ModelConfig {
    /// 96 px patches, stride 8, C = 32, C_i = 64: 12 x 12 maps.
    pub fn desk() -> Self {
        let backbone = BackboneConfig::desk();
        Self {
            cmim: CmimConfig::new(backbone.out_channels(), AttentionConfig::desk()),
            backbone,
            fusion_mode: FusionMode::Full,
            labels: LabelConfig::default(),
            filter: FilterConfig::default(),
            patch_size: 96,
        }
    }

    /// 288 px patches, stride 16, C = C_i = 256: 18 x 18 maps.
    pub fn paper() -> Self {
        let backbone = BackboneConfig::paper();
        Self {
            cmim: CmimConfig::new(backbone.out_channels(), AttentionConfig::paper()),
            backbone,
            fusion_mode: FusionMode::Full,
            labels: LabelConfig::default(),
            filter: FilterConfig::default(),
            patch_size: 288,
        }
    }

    pub fn with_mode(mut self, mode: FusionMode) -> Self {
        self.fusion_mode = mode;
        self
    }

    pub fn stride(&self) -> usize {
        self.backbone.downsample()
    }

    pub fn map_size(&self) -> Result<usize> {
        self.backbone.map_size(self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.map_size()?;
        self.cmim.validate()?;
        if self.cmim.channels != self.backbone.out_channels() {
            return Err(Error::InvalidArgument(format!(
                "fusion expects {} channels but the backbone produces {}",
                self.cmim.channels,
                self.backbone.out_channels()
            )));
        }
        self.labels.validate()?;
        self.filter.validate()
    }
}

/// One template/search pair in patch coordinates.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub template_rgb: Tensor,
    pub template_depth: Tensor,
    pub template_box: BBox,
    pub search_rgb: Tensor,
    pub search_depth: Tensor,
    /// Ground truth in the search patch.
    pub search_box: BBox,
    /// The box the search crop was centred on; regression is relative to its size.
    pub search_prior: BBox,
}

/// Losses of one pair. `total` and `cls_final` carry the training gradient;
/// `cls_mean` averages the classification loss over all filter iterates.
#[derive(Debug, Clone, Copy)]
pub struct PairLosses {
    pub total: Var,
    pub cls_final: Var,
    pub cls_mean: Var,
    pub bbox: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub fusion: FusionNet,
    pub head: HeadParams,
}

impl Model {
    /// Fresh weights drawn from a ChaCha8 stream seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config.backbone.clone(), &mut rng)?;
        let fusion = FusionNet::new(&mut store, config.fusion_mode, config.cmim.clone(), &mut rng)?;
        let head = HeadParams::new(&mut store, config.backbone.out_channels(), &config.filter, &mut rng)?;
        Ok(Self {
            config,
            store,
            backbone,
            fusion,
            head,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.backbone.ids();
        v.extend(self.fusion.ids());
        v.extend(self.head.ids());
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        write_checkpoint(BufWriter::new(file), &self.store.named_values())
    }

    /// Builds the architecture from `config` and fills it from a checkpoint.
    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let records = read_checkpoint(BufReader::new(file))?;
        let mut model = Self::new(config, 0)?;
        model.store.load_named(&records)?;
        Ok(model)
    }

    /// Fused `C x h x w` features of an RGB patch and a 3-channel depth patch.
    pub fn fused(&self, sess: &mut Session, rgb: &Tensor, depth: &Tensor) -> Result<Var> {
        let rgb = sess.constant(rgb.clone());
        let depth = sess.constant(depth.clone());
        let (i0, d0) = self.backbone.extract(sess, rgb, depth)?;
        self.fusion.forward(sess, i0, d0)
    }

    /// Normalised classifier columns of a patch pair, times the learned gain.
    pub fn columns(&self, sess: &mut Session, rgb: &Tensor, depth: &Tensor) -> Result<Var> {
        let f = self.fused(sess, rgb, depth)?;
        let cols = feature_columns(&mut sess.tape, f, &self.config.filter)?;
        let shape = sess.tape.shape(cols).to_vec();
        let gain = sess.param(self.head.feature_gain);
        let gain = sess.tape.broadcast_to(gain, &shape)?;
        sess.tape.mul(cols, gain)
    }

    pub fn labels_for(&self, b: &BBox) -> Result<Tensor> {
        let m = self.config.map_size()?;
        gaussian_labels(b, m, m, self.config.stride(), self.config.labels.sigma_cells)
    }

    /// Builds the training graph for one pair. The box head is evaluated at
    /// the cell containing the true centre.
    pub fn pair_losses(&self, sess: &mut Session, pair: &PairSample, lambda: f64) -> Result<PairLosses> {
        let cfg = &self.config;
        let m = cfg.map_size()?;
        let threshold = cfg.labels.threshold;
        let t_cols = self.columns(sess, &pair.template_rgb, &pair.template_depth)?;
        let t_labels = self.labels_for(&pair.template_box)?;
        let iterates = learn_filter(
            &mut sess.tape,
            &[FilterSample {
                cols: t_cols,
                labels: t_labels,
            }],
            None,
            cfg.filter.n_iter,
            threshold,
            &cfg.filter,
        )?;
        let s_cols = self.columns(sess, &pair.search_rgb, &pair.search_depth)?;
        let s_labels = self.labels_for(&pair.search_box)?;
        let scores = iterates[1..]
            .iter()
            .map(|&f| Ok(vec![classify(&mut sess.tape, f, s_cols, m, m)?]))
            .collect::<Result<Vec<_>>>()?;
        let labels = [s_labels];
        let cls_final = loss_cls(&mut sess.tape, &scores[scores.len() - 1..], &labels, threshold)?;
        let cls_mean = loss_cls(&mut sess.tape, &scores, &labels, threshold)?;

        let peak = center_cell(&pair.search_box, cfg.stride(), m, m)?;
        let deltas = regression_deltas(sess, s_cols, peak.0 * m + peak.1, &self.head)?;
        let pred = decode_box_var(&mut sess.tape, deltas, peak, cfg.stride(), &pair.search_prior)?;
        let patch = cfg.patch_size as f64;
        let pred = sess.tape.scale(pred, 1.0 / patch);
        let bbox = loss_bbox(&mut sess.tape, &[pred], &[box_column(&pair.search_box, patch)])?;
        let total = loss_total(&mut sess.tape, cls_final, bbox, lambda)?;
        Ok(PairLosses {
            total,
            cls_final,
            cls_mean,
            bbox,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_profile_is_consistent() {
        let c = ModelConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.stride(), 8);
        assert_eq!(c.map_size().unwrap(), 12);
        let p = ModelConfig::paper();
        p.validate().unwrap();
        assert_eq!(p.map_size().unwrap(), 18);
    }

    #[test]
    fn checkpoint_names_follow_convention() {
        let m = Model::new(ModelConfig::desk(), 1).unwrap();
        let names: Vec<String> = m.store.named_values().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().any(|n| n.starts_with("model.backbone.rgb.")));
        assert!(names.iter().any(|n| n.starts_with("model.backbone.depth.")));
        assert!(names.iter().any(|n| n.starts_with("model.head.")));
        assert_eq!(m.ids().len(), m.store.len());
    }
}
