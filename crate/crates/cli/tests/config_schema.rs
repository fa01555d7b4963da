use std::collections::BTreeSet;
use std::path::Path;

use trustlab_cli::config::{apply_overrides, parse_override, ExperimentConfig};
use trustlab_cli::presets::{experiment, preset, Preset, PRESET_NAMES};
use trustlab_cli::reference::{flatten, reference_markdown, KEY_DOCS, OPTIONAL_KEYS};

fn repo_file(rel: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

#[test]
fn default_config_round_trips_through_toml() {
    let cfg = ExperimentConfig::default();
    let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(cfg, back);
}

#[test]
fn every_preset_round_trips_and_validates() {
    for name in PRESET_NAMES {
        match preset(name).unwrap_or_else(|| panic!("{name} not registered")) {
            Preset::Experiment(cfg) => {
                cfg.validate().unwrap_or_else(|e| panic!("{name}: {e:#}"));
                assert_eq!(*cfg, ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), "{name}");
            }
            Preset::Sweep(sp) => {
                let base = experiment(sp.base).unwrap();
                assert!(!sp.values.is_empty(), "{name}");
                for v in &sp.values {
                    let c = apply_overrides(&base, &[format!("{}={v}", sp.param)]).unwrap();
                    c.validate().unwrap_or_else(|e| panic!("{name} {}={v}: {e:#}", sp.param));
                }
            }
            Preset::Bounds(b) => assert!(b.pairs > 0 && !b.vocabs.is_empty() && !b.horizons.is_empty()),
        }
    }
}

#[test]
fn unknown_preset_lists_known_names() {
    let err = format!("{:#}", experiment("stability-ppo").unwrap_err());
    assert!(err.contains("stability-dppo-tv"), "{err}");
}

#[test]
fn unknown_key_is_rejected_by_name() {
    let err = format!("{:#}", ExperimentConfig::from_toml("[algo]\nname = \"dppo\"\nbogus_knob = 3\n").unwrap_err());
    assert!(err.contains("bogus_knob"), "{err}");
    let err = format!("{:#}", ExperimentConfig::from_toml("[trainer]\nlr = 0.1\n").unwrap_err());
    assert!(err.contains("trainer"), "{err}");
}

#[test]
fn wrong_type_names_the_key() {
    let err = format!("{:#}", ExperimentConfig::from_toml("[env]\nvocab = \"many\"\n").unwrap_err());
    assert!(err.contains("vocab"), "{err}");
}

#[test]
fn overrides_parse_typed_values() {
    let base = ExperimentConfig::default();
    let c = apply_overrides(
        &base,
        &[
            "algo.c_cap=inf".into(),
            "algo.name=minimal_negative".into(),
            "train.lr=0.125".into(),
            "seed=7".into(),
            "env.context_window=2".into(),
            "advantage.normalize_std=false".into(),
        ],
    )
    .unwrap();
    assert!(c.algo.c_cap.is_infinite());
    assert_eq!(c.train.lr, 0.125);
    assert_eq!(c.seed, 7);
    assert_eq!(c.env.context_window, Some(2));
    assert!(!c.advantage.normalize_std);
    assert_eq!(format!("{:?}", c.algo.name), "MinimalNegative");
}

#[test]
fn bad_overrides_are_rejected() {
    let base = ExperimentConfig::default();
    assert!(parse_override("no_equals_sign").is_err());
    assert!(apply_overrides(&base, &["algo.nonexistent=1".into()]).is_err());
    assert!(apply_overrides(&base, &["train.lr=fast".into()]).is_err());
    assert!(apply_overrides(&base, &["algo.name=ppo".into()]).is_err());
}

#[test]
fn invalid_values_fail_validation() {
    for set in ["train.group_size=1", "env.vocab=1", "env.horizon=0", "train.lr=-1", "algo.name=dppo;algo.delta=0", "train.beta1=1.5"] {
        let sets: Vec<String> = set.split(';').map(String::from).collect();
        let c = apply_overrides(&ExperimentConfig::default(), &sets).unwrap();
        assert!(c.validate().is_err(), "{set} should not validate");
    }
}

#[test]
fn reference_documents_exactly_the_schema_keys() {
    let defaults = toml::Table::try_from(ExperimentConfig::default()).unwrap();
    let mut schema: BTreeSet<String> = flatten(&defaults).into_iter().map(|(k, _)| k).collect();
    schema.extend(OPTIONAL_KEYS.iter().map(|k| k.to_string()));
    let documented: BTreeSet<String> = KEY_DOCS.iter().map(|(k, _)| k.to_string()).collect();
    assert_eq!(schema, documented);
    assert_eq!(documented.len(), KEY_DOCS.len(), "duplicate key in KEY_DOCS");
}

#[test]
fn optional_keys_accept_values() {
    for key in OPTIONAL_KEYS {
        let c = apply_overrides(&ExperimentConfig::default(), &[format!("{key}=4")]).unwrap();
        c.validate().unwrap();
    }
}

#[test]
fn checked_in_reference_page_is_current() {
    assert_eq!(repo_file("docs/config-reference.md"), reference_markdown(), "regenerate with `trustlab reference --out docs/config-reference.md`");
}

#[test]
fn presets_named_in_docs_exist() {
    let known: BTreeSet<&str> = PRESET_NAMES.iter().copied().collect();
    for doc in ["README.md", "docs/config-reference.md"] {
        let text = repo_file(doc);
        for word in text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '-' || c == '.')) {
            let w = word.trim_end_matches('.');
            let looks_like_preset = ["stability-", "anchor-", "minimal-negative-", "efficiency-", "sweep-"].iter().any(|p| w.starts_with(p));
            if looks_like_preset {
                assert!(known.contains(w), "{doc} mentions unknown preset {w:?}");
            }
        }
    }
}
