use std::fs;

use super::*;
use crate::continual::GeneratorSettings;
use crate::diffusion::Sigma2Choice;

fn parse(text: &str) -> Result<ExperimentConfig> {
    let config = ExperimentConfig::from_toml_str(text, None)?;
    config.validate()?;
    Ok(config)
}

const MINIMAL: &str = r#"
seeds = [0]

[method]
kind = "sft"

[data]
kind = "synthetic"
"#;

#[test]
fn minimal_config_fills_every_default() {
    let config = parse(MINIMAL).unwrap();
    assert_eq!(config.seeds, vec![0]);
    assert_eq!(config.classes_per_task, 2);
    assert_eq!(config.method, ClMethod::Sft);
    assert_eq!(config.protocol, TrainProtocol::default());
    assert_eq!(config.classifier_channels, vec![64, 128, 256, 128]);
    let DataSource::Synthetic { spec } = &config.data else {
        panic!("expected a synthetic source");
    };
    assert_eq!(*spec, SynthSpec::default());
}

#[test]
fn full_config_round_trips_every_section() {
    let text = r#"
seeds = [3, 5]
classes_per_task = 3

[method]
kind = "dsg"
lambda = 0.5
init = "cold"

[method.generator]
timesteps = 100
epochs = 25
replay_pool_size = 300

[protocol]
learning_rate = 0.002
patience = 10

[classifier]
channels = [8, 16, 32, 16]

[data]
kind = "synthetic"
num_classes = 9
noise_level = 0.1
freq_step = 0.3
seed = 7
"#;
    let config = parse(text).unwrap();
    assert_eq!(config.seeds, vec![3, 5]);
    assert_eq!(config.classes_per_task, 3);
    let ClMethod::Dsg {
        generator,
        lambda,
        init,
    } = &config.method
    else {
        panic!("expected dsg");
    };
    assert_eq!(*lambda, 0.5);
    assert_eq!(*init, GeneratorInit::Cold);
    assert_eq!(generator.timesteps, 100);
    assert_eq!(generator.epochs, 25);
    assert_eq!(generator.replay_pool_size, Some(300));
    assert_eq!(generator.sigma2, Sigma2Choice::Beta); // untouched default
    assert_eq!(config.protocol.learning_rate, 0.002);
    assert_eq!(config.protocol.patience, 10);
    assert_eq!(
        config.protocol.batch_size,
        TrainProtocol::default().batch_size
    );
    assert_eq!(config.classifier_channels, vec![8, 16, 32, 16]);
    let DataSource::Synthetic { spec } = &config.data else {
        panic!("expected a synthetic source");
    };
    assert_eq!(spec.num_classes, 9);
    assert_eq!(spec.classes_per_task, 3); // inherited from the top level
    assert_eq!(spec.noise_level, 0.1);
    assert_eq!(spec.seed, 7);
}

#[test]
fn er_and_gr_methods_parse() {
    let er = parse(&MINIMAL.replace("kind = \"sft\"", "kind = \"er\"\ncapacity = 300")).unwrap();
    assert_eq!(er.method, ClMethod::Er { capacity: 300 });
    let gr = parse(&MINIMAL.replace("kind = \"sft\"", "kind = \"gr\"")).unwrap();
    assert_eq!(
        gr.method,
        ClMethod::Gr {
            generator: GeneratorSettings::default()
        }
    );
}

#[test]
fn unknown_keys_are_rejected_at_every_level() {
    for (text, needle) in [
        (format!("typo = 1\n{MINIMAL}"), "typo"),
        (
            MINIMAL.replace("kind = \"sft\"", "kind = \"sft\"\nflavor = 2"),
            "flavor",
        ),
        (
            MINIMAL.replace(
                "kind = \"synthetic\"",
                "kind = \"synthetic\"\nnum_class = 4",
            ),
            "num_class",
        ),
        (
            format!("{MINIMAL}\n[protocol]\nlearning_rte = 0.1\n"),
            "learning_rte",
        ),
        (
            format!(
                "{}\n[method.generator]\ntime_steps = 10\n",
                MINIMAL.replace("kind = \"sft\"", "kind = \"gr\"")
            ),
            "time_steps",
        ),
    ] {
        let err = parse(&text).unwrap_err();
        assert!(
            matches!(err, ConfigError::Parse(_)),
            "wanted parse error, got {err:?}"
        );
        assert!(
            err.to_string().contains(needle),
            "{err} should name {needle}"
        );
    }
}

#[test]
fn keys_from_the_wrong_method_kind_are_named() {
    let err =
        parse(&MINIMAL.replace("kind = \"sft\"", "kind = \"sft\"\nlambda = 1.0")).unwrap_err();
    assert!(err.to_string().contains("lambda"), "{err}");
    let err = parse(&MINIMAL.replace(
        "kind = \"sft\"",
        "kind = \"er\"\ncapacity = 10\ninit = \"warm\"",
    ))
    .unwrap_err();
    assert!(err.to_string().contains("init"), "{err}");
    let err = parse(&MINIMAL.replace("kind = \"sft\"", "kind = \"er\"")).unwrap_err();
    assert!(err.to_string().contains("capacity"), "{err}");
    let err = parse(&MINIMAL.replace("kind = \"sft\"", "kind = \"nope\"")).unwrap_err();
    assert!(err.to_string().contains("nope"), "{err}");
}

#[test]
fn negative_lambda_is_rejected_by_name() {
    let err =
        parse(&MINIMAL.replace("kind = \"sft\"", "kind = \"dsg\"\nlambda = -0.5")).unwrap_err();
    let message = err.to_string();
    assert!(matches!(err, ConfigError::Invalid(_)), "{message}");
    assert!(message.contains("lambda"), "{message}");
}

#[test]
fn semantic_checks_name_their_field() {
    for (text, needle) in [
        (MINIMAL.replace("seeds = [0]", "seeds = []"), "seeds"),
        (
            MINIMAL.replace("seeds = [0]", "seeds = [0]\nclasses_per_task = 0"),
            "classes_per_task",
        ),
        (
            format!("{MINIMAL}\n[classifier]\nchannels = []\n"),
            "channels",
        ),
        (
            MINIMAL.replace(
                "kind = \"synthetic\"",
                "kind = \"synthetic\"\nnum_classes = 3",
            ),
            "classes", // 3 classes not divisible by 2 per task
        ),
    ] {
        let err = parse(&text).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)), "{err:?}");
        assert!(
            err.to_string().contains(needle),
            "{err} should name {needle}"
        );
    }
}

#[test]
fn file_sources_resolve_relative_paths_and_must_exist() {
    let dir = tempfile::tempdir().unwrap();
    let data_path = dir.path().join("stream.csv");
    let file_config = r#"
seeds = [1]

[method]
kind = "sft"

[data]
kind = "file"
path = "stream.csv"
train_ratio = 0.75
normalize = true
"#;
    // Missing file: parses, but validation points at the path.
    let config = ExperimentConfig::from_toml_str(file_config, Some(dir.path())).unwrap();
    let err = config.validate().unwrap_err();
    assert!(err.to_string().contains("stream.csv"), "{err}");

    fs::write(
        &data_path,
        "# channels=1 length=4 classes=2\n0,0,0,0,0\n1,1,1,1,1\n",
    )
    .unwrap();
    config.validate().unwrap();
    let DataSource::File {
        path,
        train_ratio,
        normalize,
    } = &config.data
    else {
        panic!("expected a file source");
    };
    assert_eq!(path, &data_path);
    assert_eq!(*train_ratio, 0.75);
    assert!(normalize);

    // Synthetic-only keys are rejected for file sources by name.
    let err = ExperimentConfig::from_toml_str(
        &file_config.replace("normalize = true", "normalize = true\nfreq_step = 0.5"),
        Some(dir.path()),
    )
    .unwrap_err();
    assert!(err.to_string().contains("freq_step"), "{err}");

    // And a file source without a path is incomplete.
    let err = ExperimentConfig::from_toml_str(
        &file_config.replace("path = \"stream.csv\"\n", ""),
        Some(dir.path()),
    )
    .unwrap_err();
    assert!(err.to_string().contains("path"), "{err}");

    // Out-of-range split ratio names the field.
    fs::write(dir.path().join("stream2.csv"), "0,0,1\n").ok();
    let bad_ratio = file_config.replace("train_ratio = 0.75", "train_ratio = 1.5");
    let config = ExperimentConfig::from_toml_str(&bad_ratio, Some(dir.path())).unwrap();
    let err = config.validate().unwrap_err();
    assert!(err.to_string().contains("train_ratio"), "{err}");
}

#[test]
fn loading_from_disk_matches_parsing_the_same_text() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("experiment.toml");
    fs::write(&path, MINIMAL).unwrap();
    let loaded = ExperimentConfig::load(&path).unwrap();
    assert_eq!(loaded, parse(MINIMAL).unwrap());

    let err = ExperimentConfig::load(&dir.path().join("missing.toml")).unwrap_err();
    assert!(matches!(err, ConfigError::Io(_)));
}

#[test]
fn config_survives_a_json_round_trip() {
    // Reports echo the config as JSON; the echo must deserialize back.
    let config = parse(&MINIMAL.replace(
        "kind = \"sft\"",
        "kind = \"dsg\"\nlambda = 2.0\ninit = \"cold\"",
    ))
    .unwrap();
    let json = serde_json::to_string_pretty(&config).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, config);
}
