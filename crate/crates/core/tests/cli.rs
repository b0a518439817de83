use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 11

[model]
resolution = 16
vae_channels = [8, 8, 8]
d_txt = 16
text_layers = 1
d_model = 16
groups = 4
time_dim = 16

[sampler]
steps = 4
guidance = 3.0

[lora]
rank = 2
"#;

fn run(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bridgetune"))
        .current_dir(root)
        .args(args)
        .output()
        .expect("spawn bridgetune")
}

fn ok(root: &Path, args: &[&str]) {
    let out = run(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn loss_rows(path: &Path) -> usize {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,loss"));
    lines.count()
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn pipeline(root: &Path) {
    fs::write(root.join("run.toml"), CONFIG).unwrap();
    let c = ["--config", "run.toml"];
    let with = |rest: &[&str]| -> Vec<String> { c.iter().chain(rest).map(|s| s.to_string()).collect() };
    let go = |rest: &[&str]| {
        let args = with(rest);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(root, &refs);
    };
    go(&["--run-dir", "base", "gen-dataset", "--count", "6", "--styles", "arch,truss"]);
    go(&["--run-dir", "coral", "gen-dataset", "--count", "3", "--styles", "coral"]);
    go(&["--run-dir", "vae", "pretrain-vae", "--data", "base/dataset", "--vocab-data", "coral/dataset", "--steps", "3"]);
    go(&["--run-dir", "pre", "pretrain", "--bundle", "vae/bundle.ckpt", "--data", "base/dataset", "--steps", "3"]);
    for m in ["ti", "dreambooth", "hypernet", "lora"] {
        let dir = format!("ft_{m}");
        go(&["--run-dir", &dir, "finetune", m, "--bundle", "pre/bundle.ckpt", "--data", "coral/dataset", "--steps", "5"]);
    }
    go(&[
        "--run-dir", "samples", "sample", "--bundle", "pre/bundle.ckpt", "--count", "2",
        "--lora", "ft_lora/lora.ckpt", "--hypernet", "ft_hypernet/hypernet.ckpt",
        "--prompt", "bridge, water, <lora:aki:1>, <hypernet:coral_shell_bridge:0.5>",
    ]);
    go(&["--run-dir", "ti_samples", "sample", "--bundle", "pre/bundle.ckpt", "--ti", "ft_ti/ti.ckpt", "--prompt", "a photo of a<the core bridge>"]);
    go(&["--run-dir", "merged", "merge-lora", "--bundle", "pre/bundle.ckpt", "--lora", "ft_lora/lora.ckpt"]);
}

#[test]
fn full_pipeline_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let sa = snapshot(a.path());
    let sb = snapshot(b.path());
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{k} differs between identical runs");
    }

    let root = a.path();
    assert_eq!(loss_rows(&root.join("vae/loss.csv")), 3);
    for m in ["ti", "dreambooth", "hypernet", "lora"] {
        assert_eq!(loss_rows(&root.join(format!("ft_{m}/loss.csv"))), 5, "{m}");
    }
    for f in ["ft_ti/ti.ckpt", "ft_dreambooth/bundle.ckpt", "ft_hypernet/hypernet.ckpt", "ft_lora/lora.ckpt", "merged/bundle.ckpt"] {
        assert!(root.join(f).is_file(), "{f}");
    }
    let class_pngs = sa.keys().filter(|k| k.starts_with("ft_dreambooth/class_images/") && k.ends_with(".png")).count();
    assert_eq!(class_pngs, 15);
    assert!(sa.contains_key("samples/sample_0000.png") && sa.contains_key("samples/sample_0001.png"));
    assert!(sa.contains_key("ti_samples/sample_0000.png"));
    let manifest: serde_json::Value = serde_json::from_slice(&sa["ft_lora/run.json"]).unwrap();
    assert_eq!(manifest["command"], "finetune lora");
    assert_eq!(manifest["outputs"]["steps"], 5);

    // A re-run over the cached class images reproduces the same model.
    let before = sa["ft_dreambooth/bundle.ckpt"].clone();
    ok(root, &["--config", "run.toml", "--run-dir", "ft_dreambooth", "finetune", "dreambooth", "--bundle", "pre/bundle.ckpt", "--data", "coral/dataset", "--steps", "5"]);
    assert_eq!(fs::read(root.join("ft_dreambooth/bundle.ckpt")).unwrap(), before);

    let out = run(root, &["inspect", "ft_ti/ti.ckpt"]);
    assert!(out.status.success());
    let header: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(header["tensors"][0]["name"], "<the core bridge>");
    assert_eq!(header["metadata"]["kind"], "ti");
}

#[test]
fn different_seeds_give_different_datasets() {
    let root = tempfile::tempdir().unwrap();
    ok(root.path(), &["--seed", "1", "--run-dir", "a", "gen-dataset", "--count", "2"]);
    ok(root.path(), &["--seed", "2", "--run-dir", "b", "gen-dataset", "--count", "2"]);
    let a = snapshot(&root.path().join("a/dataset"));
    let b = snapshot(&root.path().join("b/dataset"));
    assert_eq!(a.len(), 4);
    assert!(a.iter().filter(|(k, _)| k.ends_with(".png")).any(|(k, v)| b[k] != *v));
}

#[test]
fn exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let p = root.path();
    assert_eq!(run(p, &["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(p, &["sample", "--bundle", "x.ckpt"]).status.code(), Some(2));

    fs::write(p.join("bad.toml"), "seed = 1\nlearning_rate = 3\n").unwrap();
    let out = run(p, &["--config", "bad.toml", "gen-dataset"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    assert_eq!(run(p, &["sample", "--bundle", "missing.ckpt", "--prompt", "bridge"]).status.code(), Some(1));
    fs::write(p.join("junk.ckpt"), "not a checkpoint").unwrap();
    assert_eq!(run(p, &["inspect", "junk.ckpt"]).status.code(), Some(1));
    assert_eq!(run(p, &["--help"]).status.code(), Some(0));
}
