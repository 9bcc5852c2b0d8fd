use super::*;
use crate::envs::EnvKind;

#[test]
fn entries_skip_comments_and_blank_lines() {
    let text = "# header\n\nenv = pendulum   # trailing\n  updates=5\n";
    let e = parse_entries(text).unwrap();
    assert_eq!(e.len(), 2);
    assert_eq!(
        (e[0].line, e[0].key.as_str(), e[0].value.as_str()),
        (3, "env", "pendulum")
    );
    assert_eq!((e[1].line, e[1].key.as_str(), e[1].value.as_str()), (4, "updates", "5"));
}

#[test]
fn malformed_lines_are_rejected() {
    assert!(matches!(
        parse_entries("env pendulum"),
        Err(ConfigError::Syntax { line: 1, .. })
    ));
    assert!(matches!(
        parse_entries("\n= 3"),
        Err(ConfigError::Syntax { line: 2, .. })
    ));
    assert!(matches!(parse_entries("Env = x"), Err(ConfigError::Syntax { .. })));
    assert!(matches!(parse_entries("env ="), Err(ConfigError::Syntax { .. })));
    assert_eq!(
        parse_entries("a = 1\nb = 2\na = 3"),
        Err(ConfigError::DuplicateKey {
            line: 3,
            first: 1,
            key: "a".into()
        })
    );
}

#[test]
fn run_config_defaults_and_overrides() {
    let d = RunConfig::parse("").unwrap();
    assert_eq!(d, RunConfig::default());
    assert_eq!(d.seeds, vec![0, 1, 2, 3, 4]);

    let c = RunConfig::parse(
        "env = pendulum\nmethod = unimodal\nseeds = 7, 9\ngamma = 0.9\noutput_dir = out/x\nupdates = 0",
    )
    .unwrap();
    assert_eq!(c.train.env, EnvKind::Pendulum);
    assert_eq!(c.train.method, Method::Unimodal);
    assert_eq!(c.train.gamma, 0.9);
    assert_eq!(c.train.updates, 0);
    assert_eq!(c.seeds, vec![7, 9]);
    assert_eq!(c.output_dir, PathBuf::from("out/x"));
    assert_eq!(c.for_seed(9).seed, 9);
}

#[test]
fn run_config_rejects_bad_values() {
    for text in [
        "bogus = 1",
        "seed = 3",
        "env = mars",
        "method = ppo",
        "gamma = 1.0",
        "batch = 0",
        "batch = -1",
        "seeds = 1, 1",
        "seeds = ",
        "actor_lr = nan",
        "record_wall_time = yes",
    ] {
        assert!(RunConfig::parse(text).is_err(), "{text}");
    }
    assert!(matches!(
        RunConfig::parse("\n\nbogus = 1"),
        Err(ConfigError::UnknownKey { line: 3, .. })
    ));
}

#[test]
fn train_config_text_round_trips() {
    let cfg = TrainConfig {
        env: EnvKind::SmoothReacher,
        method: Method::Gumbel,
        temperature: 0.1 + 0.2,
        actor_lr: 1.0 / 3.0,
        seed: u64::MAX,
        record_wall_time: true,
        ..TrainConfig::default()
    };
    let text = train_config_text(&cfg);
    assert_eq!(parse_train_config(&text).unwrap(), cfg);
    assert_eq!(parse_train_config(&text).map(|c| train_config_text(&c)).unwrap(), text);
    assert!(parse_train_config("seeds = 1").is_err());
}

#[test]
fn sweep_cells() {
    let s = SweepConfig::parse("cells = 4x4, 1x64\nupdates = 10").unwrap();
    assert_eq!(s.cells, vec![(4, 4), (1, 64)]);
    assert_eq!(s.run.train.updates, 10);
    assert_eq!(
        s.cells.iter().map(|&c| cell_label(c)).collect::<Vec<_>>(),
        ["4x4", "1x64"]
    );
    assert_eq!(s.run.for_cell((1, 64)).train.n_classes, 64);

    assert_eq!(SweepConfig::parse("updates = 10"), Err(ConfigError::Missing("cells")));
    for bad in [
        "cells = 4",
        "cells = 0x4",
        "cells = 4x4,4x4",
        "cells = 4x4\nn_factors = 2",
        "cells = 4x4\nmethod = unimodal",
    ] {
        assert!(SweepConfig::parse(bad).is_err(), "{bad}");
    }
}

#[test]
fn estlab_grid() {
    let c = EstlabConfig::parse("methods = ste, gumbel_soft\ntemperatures = 0.5, 2\nseeds = 1,2,3\nn_samples = 1000")
        .unwrap();
    assert_eq!(c.cells().len(), 12);
    assert_eq!(c.cells()[0], (1, SampleMethod::Ste, 0.5));
    assert_eq!(c.cells()[1], (1, SampleMethod::Ste, 2.0));
    assert_eq!(c.objective, ObjectiveKind::Linear);
    for bad in [
        "methods = reinforce",
        "temperatures = 0",
        "n_samples = 10",
        "n_factors = 5\nn_classes = 5",
        "objective = cubic",
        "env = pendulum",
    ] {
        assert!(EstlabConfig::parse(bad).is_err(), "{bad}");
    }
}
