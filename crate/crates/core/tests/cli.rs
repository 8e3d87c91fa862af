mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use common::{arch, random_component, rng};
use gbnf::boost::{GBNFModel, LogPartition, MixtureMode};
use gbnf::cli::{cmd_eval, cmd_grid, cmd_partition, cmd_sample, cmd_train, EXIT_INPUT, EXIT_MODEL_STATE};
use gbnf::diffcore::Matrix;
use gbnf::flows::FlowComponent;
use gbnf::targets::{read_csv_matrix, write_csv_matrix, BoundingBox};
use gbnf::trainer::{derived_rng, load_checkpoint, save_checkpoint, standard_normal_matrix, Checkpoint, Purpose, RngDescriptor};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn gbnf(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_gbnf"))
        .args(args)
        .output()
        .expect("binary runs")
        .status
        .code()
        .unwrap()
}

fn write_model(dir: &Path, name: &str, model: GBNFModel) -> PathBuf {
    let path = dir.join(name);
    let ck = Checkpoint {
        metadata: "config_hash=feedface\n".into(),
        stage: model.len() as u32,
        model,
        rng: RngDescriptor::capture(&derived_rng(0, Purpose::Train, 0)),
    };
    save_checkpoint(&ck, &path).unwrap();
    path
}

fn identity(dir: &Path) -> PathBuf {
    let m = GBNFModel::from_parts(MixtureMode::Additive, vec![FlowComponent::zeros(arch(2, 1, 4)).unwrap()], vec![1.0])
        .unwrap();
    write_model(dir, "identity.ckpt", m)
}

fn multiplicative(dir: &Path) -> PathBuf {
    let mut r = rng(3);
    let comps = vec![random_component(arch(2, 1, 4), 0.4, &mut r), random_component(arch(2, 1, 4), 0.4, &mut r)];
    let m = GBNFModel::from_parts(MixtureMode::Multiplicative, comps, vec![1.0, 0.5]).unwrap();
    write_model(dir, "mult.ckpt", m)
}

fn smoke_config(dir: &Path, id: &str) -> PathBuf {
    let path = dir.join(format!("{id}.toml"));
    fs::write(
        &path,
        format!(
            "[run]\nid = \"{id}\"\nseed = 3\n[data]\nkind = \"toy\"\nname = \"8gaussians\"\nn_train = 1000\nn_val = 200\nn_test = 200\n\
             [flow]\nsteps = 1\nhidden = 8\n[boost]\ncomponents = 2\n[train]\nmax_steps = 200\nbatch_size = 64\nsteps_per_epoch = 50\n"
        ),
    )
    .unwrap();
    path
}

#[test]
fn train_writes_stage_checkpoints_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path(), "smoke");
    let out = dir.path().join("runs");
    let m = cmd_train(&cfg, &out).unwrap();
    assert_eq!(m.status, "complete");
    assert_eq!(m.checkpoints.len(), 2);
    for p in m.checkpoints.iter().chain(m.final_checkpoint.iter()).chain([&m.stage_log]) {
        assert!(p.exists(), "{}", p.display());
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("smoke/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], m.config_hash);
    let log = fs::read_to_string(&m.stage_log).unwrap();
    assert_eq!(log.lines().count(), 2);
    let last = load_checkpoint(m.final_checkpoint.as_ref().unwrap()).unwrap();
    assert_eq!(last.model.len(), 2);
    assert!(last.metadata.starts_with(&format!("config_hash={}", m.config_hash)));

    // the run directory already exists
    let code = gbnf(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_INPUT);
}

#[test]
fn repeated_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = cmd_train(&smoke_config(dir.path(), "a"), &dir.path().join("a")).unwrap();
    let b = cmd_train(&smoke_config(dir.path(), "a"), &dir.path().join("b")).unwrap();
    for (x, y) in a.checkpoints.iter().zip(&b.checkpoints) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    assert_eq!(
        fs::read(a.final_checkpoint.unwrap()).unwrap(),
        fs::read(b.final_checkpoint.unwrap()).unwrap()
    );
}

#[test]
fn config_errors_exit_with_input_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[data]\nkind = \"toy\"\nname = \"8gaussians\"\n[boost]\ncomponents = 0\n").unwrap();
    let out = dir.path().join("o");
    assert_eq!(gbnf(&["train", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]), EXIT_INPUT);
    let missing = dir.path().join("none.toml");
    assert_eq!(gbnf(&["train", "--config", missing.to_str().unwrap()]), EXIT_INPUT);
    assert_eq!(gbnf(&["frobnicate"]), EXIT_INPUT);
}

#[test]
fn grid_of_identity_model() {
    let dir = tempfile::tempdir().unwrap();
    let ck = identity(dir.path());
    let out = dir.path().join("g");
    cmd_grid(&ck, BoundingBox::new(-4.0, 4.0, -4.0, 4.0).unwrap(), 3, &out).unwrap();
    let text = fs::read_to_string(out.with_extension("csv")).unwrap();
    assert!(text.starts_with("# config_hash=feedface\n"));
    let t = read_csv_matrix(text.as_bytes(), true).unwrap();
    assert_eq!(t.rows(), 9);
    let best = (0..9).max_by(|&a, &b| t.get(a, 2).total_cmp(&t.get(b, 2))).unwrap();
    assert_eq!((t.get(best, 0), t.get(best, 1)), (0.0, 0.0));
    assert!((t.get(best, 2) + LN_2PI).abs() < 1e-12);

    let pgm = fs::read(out.with_extension("pgm")).unwrap();
    let header = b"P5\n# config_hash=feedface\n3 3\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    let pixels = &pgm[header.len()..];
    assert_eq!(pixels.len(), 9);
    assert_eq!(pixels[4], 255);
    assert_eq!(*pixels.iter().min().unwrap(), 0);

    cmd_grid(&ck, BoundingBox::new(-4.0, 4.0, -4.0, 4.0).unwrap(), 57, &out).unwrap();
    let t = read_csv_matrix(fs::File::open(out.with_extension("csv")).unwrap(), true).unwrap();
    assert_eq!(t.rows(), 57 * 57);
    assert!(cmd_grid(&ck, BoundingBox::new(-4.0, 4.0, -4.0, 4.0).unwrap(), 1, &out).is_err());
}

#[test]
fn grid_of_an_additive_model_integrates_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(4);
    let comps = vec![random_component(arch(2, 1, 6), 0.3, &mut r), random_component(arch(2, 1, 6), 0.3, &mut r)];
    let ck = write_model(dir.path(), "mix.ckpt", GBNFModel::from_weights(comps, vec![0.6, 0.4]).unwrap());
    let out = dir.path().join("mix");
    cmd_grid(&ck, BoundingBox::new(-8.0, 8.0, -8.0, 8.0).unwrap(), 400, &out).unwrap();
    let t = read_csv_matrix(fs::File::open(out.with_extension("csv")).unwrap(), true).unwrap();
    let cell = (16.0 / 400.0) * (16.0 / 400.0);
    let total: f64 = (0..t.rows()).map(|i| t.get(i, 2).exp()).sum::<f64>() * cell;
    assert!((0.98..=1.02).contains(&total), "{total}");
}

#[test]
fn grid_with_stale_partition_exits_with_state_code() {
    let dir = tempfile::tempdir().unwrap();
    let ck = multiplicative(dir.path());
    let out = dir.path().join("g");
    let args = ["grid", "--checkpoint", ck.to_str().unwrap(), "--res", "10", "--out", out.to_str().unwrap()];
    assert_eq!(gbnf(&args), EXIT_MODEL_STATE);
    assert_eq!(gbnf(&["partition", "--checkpoint", ck.to_str().unwrap(), "--samples", "5000"]), 0);
    assert_eq!(gbnf(&args), 0);
}

#[test]
fn sampling() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(5);
    let comps = vec![random_component(arch(2, 1, 6), 0.3, &mut r), random_component(arch(2, 1, 6), 0.3, &mut r)];
    let ck = write_model(dir.path(), "mix.ckpt", GBNFModel::from_weights(comps, vec![0.7, 0.3]).unwrap());

    let empty = dir.path().join("empty.csv");
    cmd_sample(&ck, 0, 1, &empty).unwrap();
    assert_eq!(fs::read_to_string(&empty).unwrap(), "# config_hash=feedface\nx1,x2,component\n");

    let n = 100_000;
    let a = dir.path().join("a.csv");
    cmd_sample(&ck, n, 7, &a).unwrap();
    let t = read_csv_matrix(fs::File::open(&a).unwrap(), true).unwrap();
    assert_eq!(t.rows(), n);
    let first = (0..n).filter(|&i| t.get(i, 2) == 1.0).count() as f64 / n as f64;
    let sd = (0.7 * 0.3 / n as f64).sqrt();
    assert!((first - 0.7).abs() < 3.0 * sd, "{first}");

    let b = dir.path().join("b.csv");
    cmd_sample(&ck, n, 7, &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let mult = multiplicative(dir.path());
    let code = gbnf(&["sample", "--checkpoint", mult.to_str().unwrap(), "--n", "5", "--out", b.to_str().unwrap()]);
    assert_eq!(code, EXIT_MODEL_STATE);
}

#[test]
fn evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let ck = identity(dir.path());
    let x = standard_normal_matrix(100_000, 2, &mut rng(6)).unwrap();
    let data = dir.path().join("x.csv");
    write_csv_matrix(fs::File::create(&data).unwrap(), &[], &[], &x, None).unwrap();
    let m = cmd_eval(&ck, &data, false).unwrap();
    assert_eq!(m.n, 100_000);
    assert!((m.mean_log_likelihood + 2.837_877).abs() < 0.02, "{}", m.mean_log_likelihood);
    let median = m.quantiles.iter().find(|(q, _)| *q == 0.5).unwrap().1;
    // |x|² ~ χ²₂ has median 2 ln 2
    assert!((median - (-LN_2PI - 2f64.ln())).abs() < 0.02);
    assert_eq!(cmd_eval(&ck, &data, false).unwrap(), m);

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let code = gbnf(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", empty.to_str().unwrap()]);
    assert_eq!(code, EXIT_INPUT);

    let wide = dir.path().join("wide.csv");
    write_csv_matrix(fs::File::create(&wide).unwrap(), &[], &[], &Matrix::zeros(3, 3), None).unwrap();
    let code = gbnf(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", wide.to_str().unwrap()]);
    assert_eq!(code, EXIT_INPUT);

    let report = dir.path().join("m.json");
    let args = ["eval", "--checkpoint", ck.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", report.to_str().unwrap()];
    assert_eq!(gbnf(&args), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["config_hash"], "feedface");
}

#[test]
fn partition_command() {
    let dir = tempfile::tempdir().unwrap();
    let ck = multiplicative(dir.path());
    let a = cmd_partition(&ck, 10_000, 4).unwrap().model.log_partition().unwrap();
    let b = cmd_partition(&ck, 10_000, 4).unwrap().model.log_partition().unwrap();
    assert_eq!(a, b);
    assert_eq!(load_checkpoint(&ck).unwrap().model.log_partition(), Some(b));
    let big = cmd_partition(&ck, 1_000_000, 4).unwrap().model.log_partition().unwrap();
    let ratio = a.stderr / big.stderr;
    assert!((7.0..14.0).contains(&ratio), "{ratio}");
    assert!(cmd_partition(&ck, 999, 4).is_err());

    let single = GBNFModel::from_parts(
        MixtureMode::Multiplicative,
        vec![random_component(arch(2, 1, 4), 0.4, &mut rng(8))],
        vec![1.0],
    )
    .unwrap();
    let one = write_model(dir.path(), "one.ckpt", single);
    let lp = cmd_partition(&one, 5000, 1).unwrap().model.log_partition().unwrap();
    assert_eq!(lp, LogPartition { value: 0.0, stderr: 0.0 });

    let add = identity(dir.path());
    assert_eq!(gbnf(&["partition", "--checkpoint", add.to_str().unwrap()]), EXIT_MODEL_STATE);
}
