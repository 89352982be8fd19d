use proptest::prelude::*;
use styleswap_cli::config::{parse_lines, resolve, InvertSettings, Settings, TrainSettings};

fn kv(pairs: Vec<(&str, String)>) -> Vec<(String, String)> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn round_trip<S: Settings>(flags: &[(String, String)]) -> Result<(), TestCaseError> {
    let first: S = resolve(None, &[], flags).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let text = first.to_config_text();
    let file = parse_lines(&text).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let second: S = resolve(None, &file, &[]).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(first.entries(), second.entries());
    Ok(())
}

proptest! {
    #[test]
    fn train_settings_survive_a_file_round_trip(
        channels in prop::collection::vec(1usize..512, 1..6),
        steps in 1u64..1_000_000,
        lr in 1e-8f64..1.0,
        lambda_id in 0.0f64..1e3,
        mask in prop::option::of(0u64..1000),
        seed in any::<u64>(),
    ) {
        let list = channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        let flags = kv(vec![
            ("data", "data dir".into()),
            ("embedders", "e.bin".into()),
            ("out", "run".into()),
            ("channels", list),
            ("steps", steps.to_string()),
            ("learning_rate", lr.to_string()),
            ("lambda_id", lambda_id.to_string()),
            ("mask_stage_start", mask.map_or("none".into(), |m| m.to_string())),
            ("seed", seed.to_string()),
        ]);
        round_trip::<TrainSettings>(&flags)?;
    }

    #[test]
    fn invert_settings_survive_a_file_round_trip(
        many in any::<bool>(),
        iterations in prop::option::of(0usize..500),
        step in 1e-6f64..1.0,
        plus in any::<bool>(),
    ) {
        let flags = kv(vec![
            ("ckpt", "m.bin".into()),
            ("source", "s.png".into()),
            ("target", "t.png".into()),
            ("pool", "pool".into()),
            ("out", "w.bin".into()),
            ("mode", if many { "one2many" } else { "one2one" }.into()),
            ("iterations", iterations.map_or("none".into(), |n| n.to_string())),
            ("step_size", step.to_string()),
            ("space", if plus { "w_plus" } else { "w" }.into()),
        ]);
        round_trip::<InvertSettings>(&flags)?;
    }
}
