//! Plain-text `key = value` files with `[section]` headers, and the run
//! profiles they override.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::model::ModelConfig;
use crate::pipeline::{TrackerConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

/// Parses the file. `#` and `;` start comments; keys before the first
/// header land in a section named `""`.
pub fn parse_ini(text: &str, path: &str) -> Result<Vec<Section>> {
    let mut sections = vec![Section {
        name: String::new(),
        line: 0,
        entries: Vec::new(),
    }];
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        let err = |message: String| Error::Parse {
            path: path.to_string(),
            line: n + 1,
            message,
        };
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err(format!("unterminated section header `{line}`")))?
                .trim();
            if name.is_empty() {
                return Err(err("empty section name".into()));
            }
            if sections.iter().any(|s| s.name == name) {
                return Err(err(format!("duplicate section `[{name}]`")));
            }
            sections.push(Section {
                name: name.to_string(),
                line: n + 1,
                entries: Vec::new(),
            });
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(err("missing key before `=`".into()));
        }
        let section = sections.last_mut().expect("root section");
        if section.entries.iter().any(|e| e.key == k) {
            return Err(err(format!("duplicate key `{k}`")));
        }
        section.entries.push(Entry {
            key: k.to_string(),
            value: v.to_string(),
            line: n + 1,
        });
    }
    if sections[0].entries.is_empty() {
        sections.remove(0);
    }
    Ok(sections)
}

/// Typed access to entries, with errors naming the key and its line.
pub struct Reader<'a> {
    pub path: &'a str,
}

impl Reader<'_> {
    pub fn error(&self, e: &Entry, message: impl std::fmt::Display) -> Error {
        Error::Parse {
            path: self.path.to_string(),
            line: e.line,
            message: format!("key `{}`: {message}", e.key),
        }
    }

    pub fn get<T: FromStr>(&self, e: &Entry) -> Result<T> {
        e.value
            .parse()
            .map_err(|_| self.error(e, format!("cannot parse `{}`", e.value)))
    }

    pub fn bool(&self, e: &Entry) -> Result<bool> {
        match e.value.as_str() {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            v => Err(self.error(e, format!("expected a boolean, got `{v}`"))),
        }
    }
}

/// Resolved constants for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
}

impl Profile {
    pub fn named(name: &str, seed: u64) -> Result<Self> {
        let (model, train) = match name {
            "desk" => (ModelConfig::desk(), TrainConfig::desk(seed)),
            "paper" => (ModelConfig::paper(), TrainConfig::paper(seed)),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown profile `{other}` (expected `desk` or `paper`)"
                )))
            }
        };
        Ok(Self {
            name: name.to_string(),
            model,
            train,
            tracker: TrackerConfig {
                seed,
                ..TrackerConfig::default()
            },
        })
    }

    /// Applies `[model]`, `[train]` and `[tracker]` overrides.
    pub fn apply(&mut self, sections: &[Section], path: &str) -> Result<()> {
        let r = Reader { path };
        for s in sections {
            for e in &s.entries {
                match (s.name.as_str(), e.key.as_str()) {
                    ("model", "fusion_mode") => self.model.fusion_mode = r.get::<FusionMode>(e)?,
                    ("model", "cma_layers") => self.model.cmim.layers = r.get(e)?,
                    ("model", "pos_encoding_every_layer") => self.model.cmim.pos_encoding_every_layer = r.bool(e)?,
                    ("model", "share_backbone") => self.model.backbone.share_weights = r.bool(e)?,
                    ("model", "n_iter") => self.model.filter.n_iter = r.get(e)?,
                    ("model", "filter_step") => self.model.filter.step = r.get(e)?,
                    ("model", "threshold") => self.model.labels.threshold = r.get(e)?,
                    ("model", "sigma_cells") => self.model.labels.sigma_cells = r.get(e)?,
                    ("train", "epochs") => self.train.epochs = r.get(e)?,
                    ("train", "pairs_per_epoch") => self.train.pairs_per_epoch = r.get(e)?,
                    ("train", "batch_size") => self.train.batch_size = r.get(e)?,
                    ("train", "learning_rate") => self.train.learning_rate = r.get(e)?,
                    ("train", "lr_decay_factor") => self.train.lr_decay_factor = r.get(e)?,
                    ("train", "lr_decay_period_epochs") => self.train.lr_decay_period_epochs = r.get(e)?,
                    ("train", "weight_decay") => self.train.weight_decay = r.get(e)?,
                    ("train", "lambda") => self.train.lambda = r.get(e)?,
                    ("train", "crop_area_factor") => self.train.crop_area_factor = r.get(e)?,
                    ("train", "template_jitter") => self.train.template_jitter = r.get(e)?,
                    ("train", "search_jitter") => self.train.search_jitter = r.get(e)?,
                    ("train", "search_scale_jitter") => self.train.search_scale_jitter = r.get(e)?,
                    ("train", "max_frame_gap") => self.train.max_frame_gap = r.get(e)?,
                    ("train", "flip_probability") => self.train.flip_probability = r.get(e)?,
                    ("train", "max_depth_mm") => {
                        self.train.max_depth_mm = r.get(e)?;
                        self.tracker.max_depth_mm = self.train.max_depth_mm;
                    }
                    ("tracker", "gate") => self.tracker.confidence_gate = r.get(e)?,
                    ("tracker", "memory_capacity") => self.tracker.memory_capacity = r.get(e)?,
                    ("tracker", "init_samples") => self.tracker.init_samples = r.get(e)?,
                    ("tracker", "refine_steps") => self.tracker.refine_steps = r.get(e)?,
                    ("tracker", "crop_area_factor") => self.tracker.crop_area_factor = r.get(e)?,
                    (sec, key) if ["model", "train", "tracker"].contains(&sec) => {
                        return Err(r.error(e, format!("unknown key `{key}` in [{sec}]")));
                    }
                    (sec, _) => {
                        return Err(Error::Parse {
                            path: path.to_string(),
                            line: s.line,
                            message: format!("unknown section `[{sec}]`"),
                        })
                    }
                }
            }
        }
        self.model.cmim.channels = self.model.backbone.out_channels();
        self.model.validate()?;
        self.train.validate()?;
        self.tracker.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let s = parse_ini("a = 1\n# note\n[train]\nepochs = 3 ; inline\n", "f").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].entries[0].value, "3");
        assert_eq!(s[1].entries[0].line, 4);
    }

    #[test]
    fn malformed_lines_name_the_line() {
        match parse_ini("[x]\nnot a pair\n", "f.ini") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let mut p = Profile::named("desk", 0).unwrap();
        let s = parse_ini("[train]\nepochz = 3\n", "f").unwrap();
        let e = p.apply(&s, "f").unwrap_err().to_string();
        assert!(e.contains("epochz"), "{e}");
    }

    #[test]
    fn overrides_apply() {
        let mut p = Profile::named("desk", 0).unwrap();
        let s = parse_ini("[train]\nepochs = 3\n[model]\nfusion_mode = base\n[tracker]\ngate = 0.3\n", "f").unwrap();
        p.apply(&s, "f").unwrap();
        assert_eq!(p.train.epochs, 3);
        assert_eq!(p.model.fusion_mode, FusionMode::Base);
        assert_eq!(p.tracker.confidence_gate, 0.3);
    }
}
