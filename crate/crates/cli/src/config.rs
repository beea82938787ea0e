//! Experiment configuration files.
//!
//! A config is TOML with five sections: `[source]`, one or more
//! `[[domains]]` entries, `[train]`, `[encoders]`, and `[output]`. Only
//! `source`, `domains`, and `output` are required; every omitted `train` or
//! `encoders` key falls back to the library default. Unknown keys anywhere
//! are rejected with their full dotted path so a typo cannot silently
//! disable an option. Relative paths (checkpoints, reference images,
//! encoder weights, the output directory) resolve against the directory
//! containing the config file, so a config keeps working no matter where
//! the tool is invoked from.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use genshift::directions::{DomainReference, DEFAULT_DOMAIN_COEFFICIENT};
use genshift::trainer::{AdaptationConfig, SourceSpec};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
struct ConfigFile {
    source: SourceSection,
    #[serde(default)]
    domains: Vec<DomainSection>,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    encoders: EncoderSection,
    output: OutputSection,
}

#[derive(Debug, Deserialize)]
struct SourceSection {
    toy_seed: Option<u64>,
    checkpoint: Option<PathBuf>,
    prompt: Option<String>,
}

#[derive(Debug, Deserialize)]
struct DomainSection {
    modality: String,
    payload: String,
    coefficient: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
struct TrainSection {
    lambda_css: Option<f64>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    iterations: Option<usize>,
    seed: Option<u64>,
    anchor_sample_count: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
struct EncoderSection {
    semantic: Option<String>,
    semantic_seed: Option<u64>,
    semantic_weights: Option<PathBuf>,
    structure: Option<String>,
    structure_seed: Option<u64>,
    structure_weights: Option<PathBuf>,
    token_layer: Option<String>,
}

#[derive(Debug, Deserialize)]
struct OutputSection {
    dir: PathBuf,
}

const SOURCE_KEYS: &[&str] = &["toy_seed", "checkpoint", "prompt"];
const DOMAIN_KEYS: &[&str] = &["modality", "payload", "coefficient"];
const TRAIN_KEYS: &[&str] = &[
    "lambda_css",
    "learning_rate",
    "batch_size",
    "iterations",
    "seed",
    "anchor_sample_count",
];
const ENCODER_KEYS: &[&str] = &[
    "semantic",
    "semantic_seed",
    "semantic_weights",
    "structure",
    "structure_seed",
    "structure_weights",
    "token_layer",
];
const OUTPUT_KEYS: &[&str] = &["dir"];

fn check_table(value: &toml::Value, path: &str, allowed: &[&str]) -> Result<()> {
    let Some(table) = value.as_table() else {
        bail!("'{path}' must be a table");
    };
    for key in table.keys() {
        if !allowed.contains(&key.as_str()) {
            bail!("unknown key '{path}.{key}'");
        }
    }
    Ok(())
}

/// Every leaf in the schema is a scalar, so checking the root and each
/// section's key set covers the whole file.
fn reject_unknown_keys(root: &toml::Value) -> Result<()> {
    let Some(table) = root.as_table() else {
        bail!("the configuration root must be a table");
    };
    for (key, value) in table {
        match key.as_str() {
            "source" => check_table(value, "source", SOURCE_KEYS)?,
            "domains" => {
                let Some(entries) = value.as_array() else {
                    bail!("'domains' must be an array of tables");
                };
                for (i, entry) in entries.iter().enumerate() {
                    check_table(entry, &format!("domains[{i}]"), DOMAIN_KEYS)?;
                }
            }
            "train" => check_table(value, "train", TRAIN_KEYS)?,
            "encoders" => check_table(value, "encoders", ENCODER_KEYS)?,
            "output" => check_table(value, "output", OUTPUT_KEYS)?,
            other => bail!("unknown key '{other}'"),
        }
    }
    Ok(())
}

fn resolve_path(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn build(file: ConfigFile, base: &Path) -> Result<AdaptationConfig> {
    let source = match (file.source.toy_seed, &file.source.checkpoint) {
        (Some(seed), None) => SourceSpec::Toy { seed },
        (None, Some(path)) => SourceSpec::Checkpoint { path: resolve_path(base, path) },
        (Some(_), Some(_)) => {
            bail!("'source' must set exactly one of 'toy_seed' and 'checkpoint', not both")
        }
        (None, None) => bail!("'source' must set either 'toy_seed' or 'checkpoint'"),
    };
    if file.domains.is_empty() {
        bail!("'domains' must list at least one reference");
    }
    let mut domains = Vec::with_capacity(file.domains.len());
    for (i, section) in file.domains.iter().enumerate() {
        let coefficient = section.coefficient.unwrap_or(DEFAULT_DOMAIN_COEFFICIENT);
        let reference = match section.modality.as_str() {
            "text" => DomainReference::text(&section.payload, coefficient),
            "image" => {
                let resolved = resolve_path(base, Path::new(&section.payload));
                DomainReference::image(resolved.to_string_lossy(), coefficient)
            }
            other => {
                bail!("'domains[{i}].modality' must be \"text\" or \"image\", got \"{other}\"")
            }
        };
        domains.push(reference);
    }
    let output_dir = resolve_path(base, &file.output.dir);

    let mut config = AdaptationConfig::new(source, domains, output_dir);
    if let Some(prompt) = file.source.prompt {
        config.source_prompt = prompt;
    }
    let train = file.train;
    if let Some(v) = train.lambda_css {
        config.lambda_css = v;
    }
    if let Some(v) = train.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = train.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = train.iterations {
        config.iterations = v;
    }
    if let Some(v) = train.seed {
        config.seed = v;
    }
    if let Some(v) = train.anchor_sample_count {
        config.anchor_sample_count = v;
    }
    let enc = file.encoders;
    if let Some(name) = enc.semantic {
        config.semantic_encoder.name = name;
    }
    if let Some(seed) = enc.semantic_seed {
        config.semantic_encoder.seed = Some(seed);
    }
    if let Some(weights) = enc.semantic_weights {
        config.semantic_encoder.weights = Some(resolve_path(base, &weights));
    }
    if let Some(name) = enc.structure {
        config.structure_encoder.name = name;
    }
    if let Some(seed) = enc.structure_seed {
        config.structure_encoder.seed = Some(seed);
    }
    if let Some(weights) = enc.structure_weights {
        config.structure_encoder.weights = Some(resolve_path(base, &weights));
    }
    if let Some(layer) = enc.token_layer {
        config.structure_encoder.token_layer = Some(layer);
    }
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<AdaptationConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config file '{}'", path.display()))?;
    let value: toml::Value = text
        .parse()
        .with_context(|| format!("cannot parse '{}' as TOML", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    (|| -> Result<AdaptationConfig> {
        reject_unknown_keys(&value)?;
        let file: ConfigFile = value.try_into()?;
        build(file, &base)
    })()
    .with_context(|| format!("invalid config '{}'", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use genshift::trainer::{DEFAULT_BATCH_SIZE, DEFAULT_LAMBDA_CSS};

    fn parse(text: &str) -> toml::Value {
        text.parse().expect("test fixture must be valid TOML")
    }

    fn minimal() -> String {
        concat!(
            "[source]\ntoy_seed = 7\n\n",
            "[[domains]]\nmodality = \"text\"\npayload = \"sketch\"\n\n",
            "[output]\ndir = \"run\"\n"
        )
        .to_string()
    }

    #[test]
    fn unknown_keys_are_reported_with_their_path() {
        let cases = [
            ("[extras]\nx = 1\n", "extras"),
            ("[train]\nlamda_css = 5.0\n", "train.lamda_css"),
            (
                "[[domains]]\nmodality = \"text\"\npayload = \"a\"\nstrength = 1.0\n",
                "domains[0].strength",
            ),
            ("[source]\nseed = 1\n", "source.seed"),
        ];
        for (text, expected) in cases {
            let err = reject_unknown_keys(&parse(text)).expect_err("unknown key must be rejected");
            assert!(
                err.to_string().contains(expected),
                "error for {text:?} should name '{expected}', got: {err}"
            );
        }
    }

    #[test]
    fn valid_sections_pass_the_key_check() {
        reject_unknown_keys(&parse(&minimal())).expect("minimal config has no unknown keys");
    }

    #[test]
    fn omitted_train_keys_keep_library_defaults() {
        let file: ConfigFile = parse(&minimal()).try_into().unwrap();
        let config = build(file, Path::new("/base")).unwrap();
        assert_eq!(config.lambda_css, DEFAULT_LAMBDA_CSS, "lambda default should apply");
        assert_eq!(config.batch_size, DEFAULT_BATCH_SIZE, "batch size default should apply");
        assert_eq!(config.seed, 0, "seed defaults to zero");
        assert_eq!(
            config.domains[0].coefficient, DEFAULT_DOMAIN_COEFFICIENT,
            "omitted coefficient should fall back to the default"
        );
    }

    #[test]
    fn relative_paths_resolve_against_the_config_directory() {
        let file: ConfigFile = parse(&minimal()).try_into().unwrap();
        let config = build(file, Path::new("/base")).unwrap();
        assert_eq!(config.output_dir, PathBuf::from("/base/run"));
    }

    #[test]
    fn source_must_name_exactly_one_origin() {
        let both = minimal().replace("toy_seed = 7", "toy_seed = 7\ncheckpoint = \"c.uhgc\"");
        let neither = minimal().replace("toy_seed = 7\n", "");
        for text in [both, neither] {
            let file: ConfigFile = parse(&text).try_into().unwrap();
            let err = build(file, Path::new(".")).expect_err("ambiguous source must fail");
            assert!(err.to_string().contains("source"), "error should name the section: {err}");
        }
    }

    #[test]
    fn empty_domains_list_is_rejected_by_name() {
        let text = minimal().replace("[[domains]]\nmodality = \"text\"\npayload = \"sketch\"\n\n", "");
        let file: ConfigFile = parse(&text).try_into().unwrap();
        let err = build(file, Path::new(".")).expect_err("empty domains must fail");
        assert!(err.to_string().contains("domains"), "error should name 'domains': {err}");
    }
}
