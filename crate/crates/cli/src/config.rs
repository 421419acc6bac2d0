//! Flat `key=value` run configuration with dotted section prefixes.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use artihippo::lifelong::LifelongConfig;
use artihippo::taskdata::parse_key_values;
use artihippo::vit::ViTConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub learner: LifelongConfig,
    /// Task manifest, relative to the config file.
    pub manifest: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
    pub class_incremental: bool,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            learner: LifelongConfig::default(),
            manifest: None,
            seed: 0,
            out: PathBuf::from("run"),
            class_incremental: false,
            workers: 1,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(m) = &cfg.manifest {
            if m.is_relative() {
                cfg.manifest = Some(path.parent().unwrap_or(Path::new(".")).join(m));
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let kv = parse_key_values(text)?;
        let mut cfg = RunConfig::default();
        if let Some(p) = kv.get("model.profile") {
            cfg.learner.model = ViTConfig::profile(p)?;
        }
        let mut tree = serde_json::to_value(&cfg)?;
        for (k, v) in &kv {
            if k != "model.profile" {
                set(&mut tree, k, v)?;
            }
        }
        let cfg: RunConfig = serde_json::from_value(tree)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.learner.validate()?;
        if self.workers != 1 {
            bail!("workers must be 1; the pipeline is sequential");
        }
        Ok(())
    }

    /// The configuration as `key=value` lines, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut lines = Vec::new();
        flatten(&serde_json::to_value(self).expect("config serializes"), "", &mut lines);
        lines.join("\n") + "\n"
    }
}

fn set(tree: &mut Value, key: &str, raw: &str) -> anyhow::Result<()> {
    let mut node = tree;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
    }
    *node = match node {
        Value::Bool(_) => Value::Bool(raw.parse().with_context(|| format!("`{key}` expects true or false"))?),
        Value::Number(n) if n.is_f64() => serde_json::from_str(raw)
            .ok()
            .filter(Value::is_number)
            .ok_or_else(|| anyhow!("`{key}` expects a number"))?,
        Value::Number(_) => Value::Number(raw.parse::<u64>().with_context(|| format!("`{key}` expects an integer"))?.into()),
        Value::String(_) | Value::Null => Value::String(raw.to_string()),
        _ => bail!("`{key}` is a section, not a value"),
    };
    Ok(())
}

fn flatten(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(o) => {
            for (k, v) in o {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(v, &key, out);
            }
        }
        Value::Null => {}
        Value::String(s) => out.push(format!("{prefix}={s}")),
        other => out.push(format!("{prefix}={other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn dotted_overrides() {
        let cfg = RunConfig::parse(
            "# comment\nsearch.population=10\nsearch.n_mutants=5\nsearch.n_crossover=5\n\
             sampler.epsilon1=0\nsampler.hierarchical=false\nprecision=f32\nseed=7\ntask_token=true\n\
             search.supernet_lr=0.01\nmanifest=tasks.txt\n",
        )
        .unwrap();
        assert_eq!(cfg.learner.search.population, 10);
        assert_eq!(cfg.learner.sampler.epsilon1, 0.0);
        assert!(!cfg.learner.sampler.hierarchical);
        assert_eq!(cfg.learner.precision, artihippo::numerics::Precision::F32);
        assert_eq!(cfg.seed, 7);
        assert!(cfg.learner.task_token);
        assert_eq!(cfg.learner.search.supernet_lr, 0.01);
        assert_eq!(cfg.manifest.as_deref(), Some(Path::new("tasks.txt")));
    }

    #[test]
    fn profile_applies_before_overrides() {
        let cfg = RunConfig::parse("model.profile=vit-b8\nmodel.depth=2\n").unwrap();
        assert_eq!(cfg.learner.model.embed_dim, 768);
        assert_eq!(cfg.learner.model.depth, 2);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "search.nope=1",
            "search=1",
            "seed=-1",
            "seed=1.5",
            "task_token=yes",
            "sampler.epsilon1=high",
            "model.profile=huge",
            "search.population=7",
            "workers=4",
            "precision=f16",
            "justtext",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }
}
