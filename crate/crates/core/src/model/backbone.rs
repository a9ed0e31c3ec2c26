use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{uniform_init, ParamId, ParamStore, Session, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Output width of each 3x3 stride-2 stage; the last entry is `C`.
    pub widths: Vec<usize>,
    /// Use the RGB stream's weights for depth as well.
    pub share_weights: bool,
}

impl BackboneConfig {
    /// 16 -> 32 -> 32, stride 8.
    pub fn desk() -> Self {
        Self {
            widths: vec![16, 32, 32],
            share_weights: false,
        }
    }

    /// 32 -> 64 -> 128 -> 256, stride 16.
    pub fn paper() -> Self {
        Self {
            widths: vec![32, 64, 128, 256],
            share_weights: false,
        }
    }

    pub fn downsample(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad backbone widths {:?}", self.widths)));
        }
        Ok(())
    }

    /// Feature map side for an input of side `input`.
    pub fn map_size(&self, input: usize) -> Result<usize> {
        let n = self.downsample();
        if input == 0 || input % n != 0 {
            return Err(Error::InvalidArgument(format!(
                "input resolution {input} is not divisible by the downsampling factor {n}"
            )));
        }
        Ok(input / n)
    }
}

#[derive(Debug, Clone)]
pub struct StreamParams {
    pub convs: Vec<(ParamId, ParamId)>,
}

impl StreamParams {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut convs = Vec::with_capacity(cfg.widths.len());
        let mut cin = 3;
        for (i, &cout) in cfg.widths.iter().enumerate() {
            // He-uniform: relu halves the variance at every stage.
            let w = uniform_init(rng, &[cout, cin, 3, 3], cin * 9).map(|v| v * 6f64.sqrt());
            let w = store.add(format!("{prefix}.conv{i}.weight"), w)?;
            let b = store.add(format!("{prefix}.conv{i}.bias"), Tensor::zeros(&[cout]))?;
            convs.push((w, b));
            cin = cout;
        }
        Ok(Self { convs })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.convs.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let mut h = x;
        for &(w, b) in &self.convs {
            let (w, b) = (sess.param(w), sess.param(b));
            h = sess.tape.conv2d(h, w, Some(b), 2, 1)?;
            h = sess.tape.relu(h);
        }
        Ok(h)
    }
}

/// Two-stream feature extractor.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub rgb: StreamParams,
    /// `None` when weights are shared with the RGB stream.
    pub depth: Option<StreamParams>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let rgb = StreamParams::new(store, "model.backbone.rgb", &config, rng)?;
        let depth = if config.share_weights {
            None
        } else {
            Some(StreamParams::new(store, "model.backbone.depth", &config, rng)?)
        };
        Ok(Self { config, rgb, depth })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.rgb.ids();
        v.extend(self.depth.as_ref().map(StreamParams::ids).unwrap_or_default());
        v
    }

    /// Features `(I, D)` of a 3 x S x S RGB patch and a 3 x S x S depth patch.
    pub fn extract(&self, sess: &mut Session, rgb: Var, depth: Var) -> Result<(Var, Var)> {
        for v in [rgb, depth] {
            let shape = sess.tape.shape(v).to_vec();
            match shape[..] {
                [3, h, w] if h == w => {
                    self.config.map_size(h)?;
                }
                _ => {
                    return Err(Error::InvalidShape {
                        shape,
                        reason: "backbone input must be 3 x S x S".into(),
                    })
                }
            }
        }
        let i = self.rgb.forward(sess, rgb)?;
        let d = self.depth.as_ref().unwrap_or(&self.rgb).forward(sess, depth)?;
        Ok((i, d))
    }
}
