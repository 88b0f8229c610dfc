mod common;

use std::fs;

use minbert_peft::bench::CSV_COLUMNS;
use minbert_peft::cli::{parse_args, run, Command, TrainArgs};
use minbert_peft::data::{clean_text, jaccard, load_tsv, synth_para_label, synth_sts_score, synth_tasks, SynthSizes};
use minbert_peft::heads::{ClfKind, Task};
use minbert_peft::optim::{LrSchedule, OptimKind};
use minbert_peft::train::{fit, FineTuneMode, TrainConfig};
use minbert_peft::Error;
use proptest::prelude::*;

const COMMANDS: &str = include_str!("fixtures/commands.txt");

fn train_args(line: &str) -> TrainArgs {
    let argv = std::iter::once("minbert-peft").chain(line.split_whitespace());
    match parse_args(argv).unwrap().command {
        Command::Train(a) => a,
        other => panic!("expected train, got {other:?}"),
    }
}

fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn sst_tsv_rows() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(&dir, "sst.tsv", "id\tsentence\tsentiment\n1\tA  fine film .\t4\n2\tdull ~~ stuff\t0\n3\tmeh\t2\n");
    let got = load_tsv(&p, Task::Sst).unwrap();
    assert_eq!(got.skipped, 0);
    let rows: Vec<(&str, usize)> = got.data.sst.iter().map(|e| (e.sentence.as_str(), e.label)).collect();
    assert_eq!(rows, [("A fine film .", 4), ("dull stuff", 0), ("meh", 2)]);

    let bad = write(&dir, "bad.tsv", "sentence\tsentiment\nok\t5\nok\t1.5\n\t3\nfine\t1\n");
    let got = load_tsv(&bad, Task::Sst).unwrap();
    assert_eq!((got.data.sst.len(), got.skipped), (1, 3));

    let nocol = write(&dir, "nocol.tsv", "text\tlabel\nhi\t1\n");
    assert!(matches!(load_tsv(&nocol, Task::Sst), Err(Error::Data { .. })));
    assert!(load_tsv(&dir.path().join("absent.tsv"), Task::Sst).is_err());
}

#[test]
fn pair_tsvs_by_header_name() {
    let dir = tempfile::tempdir().unwrap();
    let sts = write(&dir, "sts.tsv", "id\tsentence1\tsentence2\tsimilarity\n1\ta b\ta c\t3.2\n2\tx\ty\t6.0\n3\tp\tq\t0\n");
    let got = load_tsv(&sts, Task::Sts).unwrap();
    assert_eq!(got.skipped, 1);
    assert_eq!(got.data.sts.iter().map(|e| e.label).collect::<Vec<_>>(), [3.2, 0.0]);

    let quora = write(&dir, "q.tsv", "is_duplicate\tsentence2\tid\tsentence1\n1\tsecond one\t7\tfirst one\n0\tb\t8\ta\n2\tb\t9\ta\n");
    let got = load_tsv(&quora, Task::Para).unwrap();
    assert_eq!(got.skipped, 1);
    let e = &got.data.para[0];
    assert_eq!((e.sentence1.as_str(), e.sentence2.as_str(), e.label), ("first one", "second one", 1.0));
}

#[test]
fn cleaning_examples() {
    assert_eq!(clean_text("  Hello,\tworld!!  "), "Hello, world!!");
    assert_eq!(clean_text("a@b#c $5"), "abc 5");
    assert_eq!(clean_text("it's (really) good; ok?"), "it's (really) good; ok?");
    assert_eq!(clean_text("\n\n"), "");
}

#[test]
fn synthetic_rules_and_determinism() {
    let s = SynthSizes { sst: 30, para: 30, sts: 30 };
    assert_eq!(synth_tasks(4, s).unwrap(), synth_tasks(4, s).unwrap());
    assert_ne!(synth_tasks(4, s).unwrap(), synth_tasks(5, s).unwrap());
    assert!(synth_tasks(4, SynthSizes { sst: 3, ..s }).is_err());

    assert_eq!(synth_para_label("c1 c2 c3", "c1 c2 c3"), 1.0);
    assert_eq!(synth_sts_score("c1 c2 c3", "c3 c2 c1"), 5.0);
    assert_eq!(synth_para_label("c1 c2", "c3 c4"), 0.0);
    assert_eq!(synth_sts_score("c1 c2", "c3 c4"), 0.0);
    assert!((jaccard("a b c", "b c d") - 0.5).abs() < 1e-7);

    let data = synth_tasks(9, SynthSizes { sst: 20, para: 40, sts: 40 }).unwrap();
    for e in &data.para {
        assert_eq!(e.label, synth_para_label(&e.sentence1, &e.sentence2));
    }
    for e in &data.sts {
        assert_eq!(e.label, synth_sts_score(&e.sentence1, &e.sentence2));
        assert!((0.0..=5.0).contains(&e.label));
    }
    let dups = data.para.iter().filter(|e| e.label == 1.0).count();
    assert!((10..=30).contains(&dups), "{dups} duplicates of 40");
}

#[test]
fn desk_tasks_are_learnable() {
    let (train, dev) = common::desk_data(0, 1000);
    let mut cfg = TrainConfig::desk(0);
    cfg.epochs = 10;
    let out = fit(&cfg, &train, &dev).unwrap();
    let best = out.metrics.epochs.iter().map(|e| e.scores).fold((0.0f64, 0.0f64), |(a, b), s| {
        (a.max(s.sst_acc), b.max(s.sts_pearson))
    });
    assert!(best.0 > 0.8 && best.1 > 0.8, "sst {:.3}, sts {:.3}", best.0, best.1);
}

#[test]
fn recorded_command_lines_parse() {
    let mut trains = 0;
    for line in COMMANDS.lines().filter(|l| !l.trim().is_empty()) {
        let argv: Vec<&str> = std::iter::once("minbert-peft").chain(line.split_whitespace()).collect();
        let cli = parse_args(&argv).unwrap_or_else(|e| panic!("{line}: {e}"));
        let Command::Train(args) = cli.command else {
            assert!(line.starts_with("ensemble --filepaths"));
            continue;
        };
        trains += 1;
        match args.to_config() {
            Ok(cfg) => assert_eq!(cfg.optim.kind, OptimKind::Adamax, "{line}"),
            Err(e) => {
                assert!(line.contains("--optim RAdam"), "{line}: {e}");
                assert!(matches!(e, Error::Config(_)));
            }
        }
    }
    assert_eq!(trains, 23);
}

#[test]
fn steady_hand_mapping() {
    let line = COMMANDS
        .lines()
        .find(|l| l.contains("--sst_lr_multiplier 4 --para_lr_multiplier 5 --sts_lr_multiplier 3 --epochs 7") && !l.contains("num_sst"))
        .unwrap();
    let cfg = train_args(line).to_config().unwrap();
    assert_eq!(cfg.fine_tune_mode, FineTuneMode::Iterative);
    assert_eq!(cfg.optim.lr, 1e-4);
    assert_eq!(cfg.batch_size, 64);
    assert!(cfg.amp);
    assert_eq!(cfg.tasks, [true; 3]);
    assert_eq!(cfg.model.clf, ClfKind::Conv);
    assert_eq!(cfg.optim.weight_decays, [9e-3, 1e-5, 1e-2]);
    assert_eq!(cfg.optim.schedule, LrSchedule::Multiplicative { gamma: 0.5 });
    assert_eq!(cfg.optim.kind, OptimKind::Adamax);
    assert_eq!(cfg.optim.multipliers, [4.0, 5.0, 3.0]);
    assert_eq!(cfg.epochs, 7);

    let repeated = COMMANDS.lines().find(|l| l.contains("--num_sst_trains 10")).unwrap();
    assert_eq!(train_args(repeated).to_config().unwrap().num_trains, [10, 1, 10]);
}

#[test]
fn usage_errors() {
    let e = parse_args(["minbert-peft", "train", "--lora_rank", "5"]).unwrap_err();
    assert!(matches!(e, Error::Usage(_)), "{e}");
    assert!(matches!(parse_args(["minbert-peft", "train", "--use_dora"]), Err(Error::Usage(_))));
    assert!(matches!(parse_args(["minbert-peft", "fly"]), Err(Error::Usage(_))));
    assert!(matches!(parse_args(["minbert-peft", "train", "--config"]), Err(Error::Usage(_))));
    assert!(train_args("train --sts_loss huber").to_config().is_err());
    let dir = tempfile::tempdir().unwrap();
    let only_sst = write(&dir, "s.tsv", "sentence\tsentiment\nx\t1\n");
    let args = train_args(&format!("train --sst_train {}", only_sst.display()));
    assert!(matches!(args.data.load(), Err(Error::Usage(_))));
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let file = write(&dir, "run.cfg", "# desk run\nlr = 3e-4\namp = true\nepochs=2\n\nuse_dora = false\n");
    let path = file.display().to_string();
    let cfg = train_args(&format!("train --config {path}")).to_config().unwrap();
    assert_eq!((cfg.optim.lr, cfg.amp, cfg.epochs), (3e-4, true, 2));
    let cfg = train_args(&format!("train --config {path} --lr 1e-3")).to_config().unwrap();
    assert_eq!((cfg.optim.lr, cfg.epochs), (1e-3, 2));
    let cfg = train_args(&format!("train --epochs 5 --config={path}")).to_config().unwrap();
    assert_eq!(cfg.epochs, 5);

    let broken = write(&dir, "broken.cfg", "lr 3e-4\n");
    assert!(matches!(parse_args(["minbert-peft", "train", "--config", broken.to_str().unwrap()]), Err(Error::Usage(_))));
}

#[test]
fn bench_command_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ranks.csv");
    let argv = [
        "minbert-peft", "bench", "--suite", "ranks", "--lora_mode", "attn", "--ranks", "1,2", "--seeds", "0",
        "--epochs", "1", "--synthetic_size", "60", "--out", out.to_str().unwrap(),
    ];
    let cli = parse_args(argv).unwrap();
    let mut log = Vec::new();
    run(&cli, &mut log).unwrap();
    let text = String::from_utf8(log).unwrap();
    assert!(text.contains("runs: 2 ok, 0 failed"), "{text}");
    let body = fs::read_to_string(&out).unwrap();
    let mut rd = csv::Reader::from_reader(body.as_bytes());
    assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), CSV_COLUMNS);
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][15], "1.000000");
    assert!(dir.path().join("ranks.csv.summary.txt").exists());
}

#[test]
fn train_then_eval_and_ensemble_commands() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.ckpt");
    let metrics = dir.path().join("m.csv");
    let train = format!(
        "train --epochs 1 --synthetic_size 60 --batch_size 16 --checkpoint {} --metrics {}",
        ck.display(),
        metrics.display()
    );
    let argv: Vec<&str> = std::iter::once("minbert-peft").chain(train.split_whitespace()).collect();
    let mut log = Vec::new();
    run(&parse_args(&argv).unwrap(), &mut log).unwrap();
    assert!(ck.exists());
    assert_eq!(fs::read_to_string(&metrics).unwrap().lines().count(), 4);

    let ckp = ck.to_str().unwrap();
    let mut log = Vec::new();
    run(&parse_args(["minbert-peft", "eval", "--checkpoint", ckp, "--synthetic_size", "60"]).unwrap(), &mut log).unwrap();
    let mut elog = Vec::new();
    let ens = ["minbert-peft", "ensemble", "--filepaths", ckp, ckp, "--synthetic_size", "60"];
    run(&parse_args(ens).unwrap(), &mut elog).unwrap();
    // Two votes for one model score the same as the model alone.
    let tail = |b: &[u8]| String::from_utf8(b.to_vec()).unwrap().split_once(": ").unwrap().1.trim().to_string();
    assert_eq!(tail(&log), tail(&elog));
}

proptest! {
    #[test]
    fn cleaning_is_idempotent(s in "\\PC{0,40}") {
        let once = clean_text(&s);
        prop_assert_eq!(clean_text(&once), once.clone());
        prop_assert!(!once.starts_with(' ') && !once.ends_with(' ') && !once.contains("  "));
    }
}
