use std::path::Path;
use std::process::{Command, Output};

use dtcn::frames::{write_wav, Waveform};

const TINY: &[&str] = &[
    "--set",
    "model.n=16",
    "--set",
    "model.b=8",
    "--set",
    "model.h=16",
    "--set",
    "model.x=2",
    "--set",
    "model.r=1",
    "--set",
    "data.count=4",
    "--set",
    "data.length=800",
    "--set",
    "eval_count=2",
    "--set",
    "train.epochs=1",
    "--set",
    "train.batch_size=2",
];

fn dtcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtcn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&dtcn(&["--help"])), 0);
    assert_eq!(code(&dtcn(&["frobnicate"])), 2);
    assert_eq!(code(&dtcn(&["count", "--set", "model.colour=3"])), 2);
    assert_eq!(code(&dtcn(&["count", "--set", "data.mix_snr_min=-25"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nepochs = 0\n").unwrap();
    assert_eq!(code(&dtcn(&["count", "--config", p(&cfg)])), 2);
}

#[test]
fn simulate_is_deterministic_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = dtcn(&["simulate", "--seed", "3", "--count", "5", "--wav", "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ma = std::fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert_eq!(ma, std::fs::read_to_string(b.join("manifest.txt")).unwrap());
    assert_eq!(ma.lines().filter(|l| !l.starts_with('#')).count(), 5);
    assert!(std::fs::read_to_string(a.join("run.toml"))
        .unwrap()
        .contains("seed = 3"));
    assert!(a.join("wav/0_mix.wav").exists() && a.join("wav/4_s2.wav").exists());
}

#[test]
fn train_separate_evaluate_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--out", p(&run)];
    args.extend_from_slice(TINY);
    let o = dtcn(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["best.ckpt", "last.ckpt", "train_log.csv", "run.toml"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let mut resume = args.clone();
    resume.extend_from_slice(&["--resume", "--set", "train.epochs=2"]);
    assert_eq!(code(&dtcn(&resume)), 0);

    let data = dir.path().join("data");
    let mut sim = vec!["simulate", "--out", p(&data), "--wav"];
    sim.extend_from_slice(TINY);
    assert_eq!(code(&dtcn(&sim)), 0);

    let sep = dir.path().join("sep");
    let ckpt = run.join("best.ckpt");
    let mix = data.join("wav/0_mix.wav");
    let o = dtcn(&[
        "separate",
        "--checkpoint",
        p(&ckpt),
        "--input",
        p(&mix),
        "--out",
        p(&sep),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(sep.join("0_mix_spk1.wav").exists() && sep.join("0_mix_spk2.wav").exists());

    let wrong_rate = dir.path().join("16k.wav");
    write_wav(&wrong_rate, &Waveform::new(vec![0.1; 1600], 16000)).unwrap();
    let o = dtcn(&[
        "separate",
        "--checkpoint",
        p(&ckpt),
        "--input",
        p(&wrong_rate),
        "--out",
        p(&sep),
    ]);
    assert_eq!(code(&o), 1);

    let manifest = data.join("manifest.txt");
    let ev = dir.path().join("eval");
    assert_eq!(
        code(&dtcn(&[
            "evaluate",
            "--checkpoint",
            p(&ckpt),
            "--manifest",
            p(&manifest),
            "--out",
            p(&ev)
        ])),
        0
    );
    let csv = std::fs::read_to_string(ev.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);

    let an = dir.path().join("analysis");
    assert_eq!(
        code(&dtcn(&[
            "analyze",
            "--checkpoint",
            p(&ckpt),
            "--manifest",
            p(&manifest),
            "--out",
            p(&an)
        ])),
        0
    );
    assert!(an.join("block_stats.csv").exists());
    assert!(an.join("scatter_1_2.csv").exists() && an.join("scatter_2_3.csv").exists());

    assert_eq!(
        code(&dtcn(&[
            "separate",
            "--checkpoint",
            p(&mix),
            "--input",
            p(&mix),
            "--out",
            p(&sep)
        ])),
        1
    );
}

#[test]
fn analyze_rejects_non_deformable_models() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--out", p(&run), "--set", "model.deformable=false"];
    args.extend_from_slice(TINY);
    assert_eq!(code(&dtcn(&args)), 0);
    let data = dir.path().join("data");
    let mut sim = vec!["simulate", "--out", p(&data)];
    sim.extend_from_slice(TINY);
    assert_eq!(code(&dtcn(&sim)), 0);
    let o = dtcn(&[
        "analyze",
        "--checkpoint",
        p(&run.join("best.ckpt")),
        "--manifest",
        p(&data.join("manifest.txt")),
        "--out",
        p(&dir.path().join("an")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("deformable"));
}

#[test]
fn count_lists_every_variant() {
    let o = dtcn(&[
        "count",
        "--set",
        "model.x=8",
        "--set",
        "model.r=3",
        "--set",
        "model.n=512",
        "--set",
        "model.b=128",
        "--set",
        "model.h=512",
    ]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("3462320") && text.contains("3536144") && text.contains("1322160"));
}
