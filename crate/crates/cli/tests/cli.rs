use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depthlaw"))
        .args(args)
        .env_remove("DEPTHLAW_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const MLP: &str = "family = mlp\ndepth = 3\nwidth = 8\ninput_dim = 4\noutputs = 2\n";

#[test]
fn transfer_prints_pairs() {
    let o = run(&["transfer", "--eta0", "0.1", "--L0", "4", "--L", "16"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "16 0.0125\n");
    let o = run(&["transfer", "--eta0", "0.1", "--L0", "4", "--depths", "16,4"]);
    assert_eq!(stdout(&o), "4 0.1\n16 0.0125\n");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["--bogus"]).status.code(), Some(2));
    assert_eq!(
        run(&["depth", "--config", "/nonexistent/x.cfg"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(&["transfer", "--eta0", "0", "--L0", "4", "--L", "16"])
            .status
            .code(),
        Some(2)
    );
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.cfg", "family = mlp\nwidht = 3\n");
    let o = run(&["depth", "--config", &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn depth_of_configs_and_graphs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "r.cfg",
        "family = resnet\nplain_units = 1\nblocks = 4\n",
    );
    assert_eq!(stdout(&run(&["depth", "--config", &cfg])), "5\n");
    assert_eq!(
        stdout(&run(&["depth", "--config", &cfg, "--set", "blocks=11"])),
        "12\n"
    );
    let g = write(dir.path(), "g.txt", "node 0 plain\nnode 1 plain\nnode 2 branch_interior\nnode 3 residual_add\nedge 0 1\nedge 1 2\nedge 1 3\nedge 2 3\ninput 0\noutput 3\n");
    let o = run(&["depth", "--graph", &g]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "3\n");
}

#[test]
fn verify_only_min_sum() {
    let o = run(&["verify", "--only", "min_sum"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let json: Vec<&str> = out.lines().filter(|l| l.starts_with('{')).collect();
    assert_eq!(json.len(), 1);
    let v: serde_json::Value = serde_json::from_str(json[0]).unwrap();
    assert_eq!(v["name"], "min_sum");
    assert_eq!(v["pass"], true);
}

#[test]
fn measure_scales_with_eta_squared() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "m.cfg", MLP);
    let s_bar = |eta: &str| -> f64 {
        let o = run(&[
            "measure", "--config", &cfg, "--eta", eta, "--n-init", "3", "--n-data", "2", "--batch",
            "8",
        ]);
        assert!(o.status.success());
        let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert_eq!(v["layers"].as_array().unwrap().len(), 3);
        v["S_bar"].as_f64().unwrap()
    };
    let r = s_bar("2.0") / s_bar("1.0");
    assert!((r - 4.0).abs() < 1e-9 * 4.0);
}

#[test]
fn seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "m.cfg", &format!("{MLP}seed = 1\n"));
    let args = [
        "solve", "--config", &cfg, "--n-init", "2", "--n-data", "1", "--batch", "4",
    ];
    let plain = stdout(&run(&args));
    let again = stdout(&run(&args));
    assert_eq!(plain, again);
    let o = Command::new(env!("CARGO_BIN_EXE_depthlaw"))
        .args(args)
        .env("DEPTHLAW_SEED", "7")
        .output()
        .unwrap();
    assert_ne!(plain, stdout(&o));
}

#[test]
fn fit_exact_line_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("arch,depth,width,seed,eta,final_loss\n");
    for l in [1usize, 10, 100] {
        let best = 10f64.powf(1.0 - 1.5 * (l as f64).log10());
        for s in 0..3 {
            for (eta, loss) in [
                (best / 10.0, 2.0),
                (best, 1.0),
                (best * 10.0, f64::INFINITY),
            ] {
                csv.push_str(&format!("mlp,{l},32,{s},{eta},{loss}\n"));
            }
        }
    }
    let input = write(dir.path(), "sweep.csv", &csv);
    let svg = dir.path().join("fit.svg");
    let o = run(&["fit", "--input", &input, "--svg", svg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!((v["alpha"].as_f64().unwrap() + 1.5).abs() < 1e-9);
    assert!((v["beta0"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(v["points"].as_array().unwrap().len(), 3);
    let text = std::fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches("<line").count(), 1);
    assert!(text.contains("slope -1.500"));
}

#[test]
fn sweep_writes_deterministic_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "plan.cfg",
        "family = mlp\nwidth = 8\ninput_dim = 8\ndepths = 2,3\nseeds = 0,1\nlr_points = 3\nclasses = 3\nn_data = 48\nbatch = 8\n",
    );
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let o = run(&[
            "--jobs",
            "2",
            "sweep",
            "--config",
            &cfg,
            "--output",
            p.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 3);
    assert!(text.starts_with("arch,depth,width,seed,eta,final_loss\nmlp,2,8,0,0.0001,"));
}
