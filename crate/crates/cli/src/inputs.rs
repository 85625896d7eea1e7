//! Shared input parsing: dataset specs, fractions, model loading, eval sets.

use std::path::{Path, PathBuf};

use patchprobe_core::data::{select_correct, Dataset, EvalSet, SynthSpec};
use patchprobe_core::error::{Error, Result};
use patchprobe_core::model::Model;
use patchprobe_core::train::{load_checkpoint, CheckpointMeta};

/// `synth:N[:seed=S]` or `cifar:PATH` (file or directory of .bin files).
pub fn load_data(spec: &str) -> Result<Dataset> {
    if let Some(rest) = spec.strip_prefix("synth:") {
        let mut parts = rest.split(':');
        let n: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::invalid(format!("bad synth spec '{spec}'")))?;
        let mut seed = 0u64;
        for part in parts {
            if let Some(s) = part.strip_prefix("seed=") {
                seed = s
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad seed in '{spec}'")))?;
            } else {
                return Err(Error::invalid(format!("unknown synth option '{part}'")));
            }
        }
        Ok(patchprobe_core::data::synth_shapes(n, seed, &SynthSpec::default()))
    } else if let Some(path) = spec.strip_prefix("cifar:") {
        patchprobe_core::data::load_cifar10_binary(Path::new(path))
    } else {
        Err(Error::invalid(format!(
            "dataset spec '{spec}' (expected synth:N[:seed=S] or cifar:PATH)"
        )))
    }
}

/// Accepts "2/255" fractions or plain decimals.
pub fn parse_fraction(s: &str) -> Result<f64> {
    if let Some((num, den)) = s.split_once('/') {
        let n: f64 = num
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad fraction '{s}'")))?;
        let d: f64 = den
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad fraction '{s}'")))?;
        if d == 0.0 {
            return Err(Error::invalid("fraction denominator is zero"));
        }
        Ok(n / d)
    } else {
        s.trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad number '{s}'")))
    }
}

pub fn load_model(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    load_checkpoint(path)
}

/// Evalset grammar: `self` (the subject model), `pair:a.ckpt,b.ckpt`
/// (every listed model must classify correctly), or `all` (no filtering).
pub fn build_evalset(
    grammar: &str,
    subject: (&str, &Model<f32>),
    dataset: &Dataset,
    max_eval: usize,
) -> Result<(EvalSet, Vec<PathBuf>)> {
    match grammar {
        "all" => Ok((
            EvalSet {
                indices: (0..dataset.len().min(max_eval)).collect(),
                provenance: vec!["unfiltered".to_string()],
            },
            vec![],
        )),
        "self" => {
            let es = select_correct(&[(subject.0, subject.1)], dataset, max_eval)?;
            Ok((es, vec![]))
        }
        other => {
            let list = other
                .strip_prefix("pair:")
                .ok_or_else(|| Error::invalid(format!("bad evalset '{other}'")))?;
            let paths: Vec<PathBuf> = list.split(',').map(PathBuf::from).collect();
            let mut models = Vec::new();
            for p in &paths {
                models.push((p.display().to_string(), load_model(p)?.0));
            }
            let refs: Vec<(&str, &dyn patchprobe_core::data::Classifier)> = models
                .iter()
                .map(|(id, m)| (id.as_str(), m as &dyn patchprobe_core::data::Classifier))
                .collect();
            let es = select_correct(&refs, dataset, max_eval)?;
            Ok((es, paths))
        }
    }
}

pub fn crc_of_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:08x}", crc32fast::hash(&bytes)))
}
