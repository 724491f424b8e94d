use robustdistill_cli::config::RunConfig;

#[test]
fn rslad_alpha_defaults_to_five_sixths() {
    let cfg = RunConfig::from_toml("[defense]\nmethod = \"RSLAD\"\n").unwrap();
    let alpha = cfg.defense.alpha.unwrap();
    assert!((alpha - 5.0 / 6.0).abs() < 1e-12);
    assert!((alpha - 0.8333).abs() < 1e-4);
    let sat = RunConfig::from_toml("[defense]\nmethod = \"SAT\"\n").unwrap();
    assert_eq!(sat.defense.alpha, Some(1.0));
}

#[test]
fn unknown_method_lists_the_valid_ones() {
    let err = RunConfig::from_toml("[defense]\nmethod = \"NOPE\"\n").unwrap_err();
    let text = format!("{err:#}");
    for m in ["NAT", "SAT", "TRADES", "MART", "ARD", "IAD", "RSLAD"] {
        assert!(text.contains(m), "{text}");
    }
}

#[test]
fn unknown_keys_name_key_and_section() {
    let err = format!("{:#}", RunConfig::from_toml("[optimizer]\nlearning_rate = 0.1\n").unwrap_err());
    assert!(err.contains("learning_rate") && err.contains("[optimizer]"), "{err}");
    let err = format!("{:#}", RunConfig::from_toml("[attack_eval.cw]\nstep = 3\n").unwrap_err());
    assert!(err.contains("`step`") && err.contains("attack_eval.cw"), "{err}");
    let err = format!("{:#}", RunConfig::from_toml("sed = 3\n").unwrap_err());
    assert!(err.contains("sed"), "{err}");
}

#[test]
fn out_of_range_values_give_the_range() {
    let err = format!("{:#}", RunConfig::from_toml("[optimizer]\nmomentum = 1.5\n").unwrap_err());
    assert!(err.contains("[0, 1)"), "{err}");
    let err = format!("{:#}", RunConfig::from_toml("[dataset]\nvalidation_fraction = 0.0\n").unwrap_err());
    assert!(err.contains("(0, 1)"), "{err}");
}

#[test]
fn emit_parse_round_trip() {
    let text = "seed = 4\n[defense]\nmethod = \"ARD\"\ntau = 3.0\n[attack_train]\nsteps = 3\n[schedule]\nepochs = 12\n";
    let once = RunConfig::from_toml(text).unwrap();
    let twice = RunConfig::from_toml(&once.emit()).unwrap();
    assert_eq!(twice, once);
    assert_eq!(twice.digest(), once.digest());
    assert_eq!(twice.emit(), once.emit());
}

#[test]
fn empty_file_resolves_every_default() {
    let cfg = RunConfig::from_toml("").unwrap();
    assert_eq!(cfg.schedule.decays.as_deref(), Some(&[43, 52, 57][..]));
    let eps = cfg.attack_eval.epsilon.unwrap();
    assert_eq!(cfg.attack_eval.pgd_trades.epsilon, Some(eps));
    assert_eq!(cfg.attack_eval.pgd_sat.steps, Some(20));
    assert_eq!(cfg.attack_train.steps, Some(10));
    let suite = cfg.suite().unwrap();
    assert_eq!(suite.pgd_trades.epsilon, eps);
}

#[test]
fn digest_tracks_content() {
    let a = RunConfig::from_toml("seed = 1\n").unwrap();
    let b = RunConfig::from_toml("seed = 2\n").unwrap();
    assert_ne!(a.digest(), b.digest());
    assert_eq!(a.digest(), RunConfig::from_toml("seed = 1\n").unwrap().digest());
}
