use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use cfmlab::experiments::selftest::SelftestConfig;
use cfmlab::experiments::{ExperimentConfig, ExperimentKind};
use cfmlab_cli::{default_config, run_cli, EXIT_CONFIG, EXIT_NUMERICAL};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cfmlab"))
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn missing_config_exits_1_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    let out = bin().args(["forward", "--config", missing.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[config]:"), "{err}");
    assert!(err.contains(missing.to_str().unwrap()), "{err}");
}

#[test]
fn invalid_configs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write(dir.path(), "u.toml", "dim = 2\nbogus = 1\n[params]\nschedule = [\"attention\"]\n");
    let order = write(dir.path(), "o.toml", "dim = 2\nn_list = [8, 4, 16]\nrepeats = 8\n[params]\nschedule = [\"attention\"]\n");
    let out = dir.path().to_str().unwrap();
    assert_eq!(run_cli(["cfmlab", "forward", "--config", &unknown, "--out", out, "--quiet"]), EXIT_CONFIG);
    assert_eq!(run_cli(["cfmlab", "poc-forward", "--config", &order, "--out", out, "--quiet"]), EXIT_CONFIG);
    assert_eq!(run_cli(["cfmlab", "no-such-command"]), EXIT_CONFIG);
    assert_eq!(run_cli(["cfmlab", "forward", "--threads", "zero"]), EXIT_CONFIG);
}

#[test]
fn overflowing_flow_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "big.toml", "dim = 2\nn_list = [4]\n[params]\nschedule = [\"mlp\", \"mlp\", \"mlp\"]\ninit_scale = 1e307\n");
    let out = bin().args(["forward", "--config", &cfg, "--out", dir.path().to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_NUMERICAL));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[numerical]:"));
}

#[test]
fn bundled_configs_are_valid() {
    for kind in ExperimentKind::ALL {
        let sub = kind.id().replace('_', "-");
        let sub = match sub.as_str() {
            "forward-poc" => "poc-forward".to_string(),
            "backward-poc" => "poc-backward".to_string(),
            _ => sub,
        };
        let text = default_config(&sub).unwrap_or_else(|| panic!("no bundled config for {sub}"));
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        cfg.validate(kind).unwrap_or_else(|e| panic!("{sub}: {e}"));
        assert_eq!(cfg.experiment, Some(kind));
    }
    SelftestConfig::from_toml(default_config("selftest").unwrap()).unwrap();
}

#[test]
fn zero_parameters_leave_the_token_in_place() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "zero.toml",
        "dim = 3\nn_list = [16]\n[params]\nschedule = [\"attention\", \"mlp\"]\ninit = \"zero\"\n[forward]\ntoken = [0.25, -0.5, 0.125]\n",
    );
    let out = dir.path().join("out");
    assert_eq!(run_cli(["cfmlab", "forward", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet"]), 0);
    let raw = std::fs::read_to_string(out.join("forward/default.raw.csv")).unwrap();
    let last = raw.lines().filter(|l| l.contains(",token,")).last().unwrap();
    let f: Vec<&str> = last.split(',').collect();
    assert_eq!(f[1].parse::<f64>().unwrap(), 1.0);
    let x: Vec<f64> = f[4..].iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(x, vec![0.25, -0.5, 0.125]);
}

#[test]
fn outputs_do_not_depend_on_threads_or_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let poc = write(
        dir.path(),
        "poc.toml",
        "name = \"small\"\ndim = 2\nn_list = [4, 8, 16]\nn_ref = 64\nrepeats = 8\n\
         [params]\nschedule = [\"attention\", \"attention\"]\nseed = 3\n\
         [integrator]\nscheme = \"rk4\"\nsubsteps_per_layer = 2\n[forward]\nw1 = \"exact\"\n",
    );
    let grad = write(
        dir.path(),
        "grad.toml",
        "name = \"small\"\ndim = 2\n[params]\nschedule = [\"attention\"]\n\
         [integrator]\nscheme = \"rk4\"\nsubsteps_per_layer = 4\n\
         [grad_check]\nschedules = [\"attention\", \"mixed\"]\nlayers = [1, 2]\ncontexts = [1, 4]\ndims = [2]\ndirections = 2\nrandom_instances = 4\n",
    );
    let run = |sub: &str, cfg: &str, threads: &str, tag: &str| {
        let out = dir.path().join(tag);
        let code = run_cli(["cfmlab", sub, "--config", cfg, "--out", out.to_str().unwrap(), "--threads", threads, "--quiet", "--seed", "11"]);
        assert_eq!(code, 0, "{sub} with {threads} threads");
        out
    };
    for (sub, cfg) in [("poc-forward", &poc), ("grad-check", &grad)] {
        let a = tree(&run(sub, cfg, "1", &format!("{sub}-a")));
        let b = tree(&run(sub, cfg, "1", &format!("{sub}-b")));
        let c = tree(&run(sub, cfg, "8", &format!("{sub}-c")));
        assert_eq!(a.len(), 3);
        assert!(a == b, "{sub}: rerun differs");
        assert!(a == c, "{sub}: thread count changes the output");
    }
}

#[test]
fn seed_flag_changes_the_draws() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "f.toml", "dim = 2\nn_list = [8]\n[params]\nschedule = [\"attention\"]\n");
    let read = |seed: &str| {
        let out = dir.path().join(seed);
        assert_eq!(run_cli(["cfmlab", "forward", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", seed, "--quiet"]), 0);
        std::fs::read(out.join("forward/default.raw.csv")).unwrap()
    };
    assert_ne!(read("1"), read("2"));
}

#[test]
fn selftest_exit_code_follows_the_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", "scale = \"quick\"\ncriteria = [2, 3, 9]\n");
    let out = bin()
        .args(["selftest", "--config", &cfg])
        .env("CFMLAB_OUT", dir.path().join("env-out"))
        .output()
        .unwrap();
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().filter(|l| l.starts_with("criterion")).count(), 3, "{stdout}");
    let summary = std::fs::read_to_string(dir.path().join("env-out/selftest/selftest.summary.csv")).unwrap();
    let any_failed = summary.lines().skip(1).any(|l| l.split(',').nth(2) == Some("0"));
    assert_eq!(out.status.code(), Some(if any_failed { cfmlab_cli::EXIT_SELFTEST } else { 0 }));
    assert_eq!(any_failed, stdout.contains("FAIL"));
}
