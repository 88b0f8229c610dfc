mod common;

use common::{bits, desk_data};
use minbert_peft::adapters::{AdapterConfig, AdapterMode};
use minbert_peft::encoder::{plan_injection, EncoderConfig, ParamFilter};
use minbert_peft::heads::{MultitaskModel, Task};
use minbert_peft::nn::Module;
use minbert_peft::optim::{
    adamax_kernel, build_task_optimizers, Ema, Hyper, LrSchedule, OptimConfig, OptimKind, Optimizer,
};
use minbert_peft::train::{FineTuneMode, TrainConfig, Trainer};
use minbert_peft::Tensor;
use proptest::prelude::*;

#[test]
fn task_optimizers_take_multipliers_and_decays() {
    let model = MultitaskModel::new(minbert_peft::heads::ModelConfig::desk(0)).unwrap();
    let mut cfg = OptimConfig::new(OptimKind::Adamax, 1e-4);
    cfg.multipliers = [4.0, 1.0, 3.0];
    cfg.weight_decays = [9e-3, 1e-5, 1e-2];
    let opts = build_task_optimizers(&model, &cfg).unwrap();
    assert!((opts.get(Task::Sst).lr() - 4e-4).abs() < 1e-18);
    assert!((opts.get(Task::Para).lr() - 1e-4).abs() < 1e-18);
    assert_eq!(cfg.hyper(Task::Para).weight_decay, 1e-5);
    assert_eq!(cfg.hyper(Task::Sst).weight_decay, 9e-3);

    let same = build_task_optimizers(&model, &OptimConfig::new(OptimKind::Adam, 1e-3)).unwrap();
    let lrs: Vec<f64> = Task::ALL.iter().map(|&t| same.get(t).lr()).collect();
    assert!(lrs.iter().all(|&l| l == lrs[0]));

    let mut bad = cfg;
    bad.multipliers[1] = 0.0;
    assert!(build_task_optimizers(&model, &bad).is_err());
}

#[test]
fn schedule_examples() {
    let m = LrSchedule::Multiplicative { gamma: 0.5 };
    assert!((m.lr_at(1e-4, 3) - 1.25e-5).abs() < 1e-18);
    assert_eq!(LrSchedule::Multiplicative { gamma: 1.0 }.lr_at(3e-4, 9), 3e-4);
    let c = LrSchedule::Cyclical { lo: 1e-4, hi: 2e-4, period: 2 };
    let got: Vec<f64> = (0..3).map(|e| c.lr_at(0.0, e)).collect();
    for (g, want) in got.iter().zip([1e-4, 2e-4, 1e-4]) {
        assert!((g - want).abs() < 1e-18, "{got:?}");
    }
    let d = LrSchedule::CyclicalDecay { lo: 1e-4, hi: 2e-4, period: 2, factor: 8.0 };
    assert!((d.lr_at(0.0, 3) - 2e-4 / 8.0).abs() < 1e-18);
    assert!(LrSchedule::Multiplicative { gamma: 0.0 }.validate().is_err());
    assert!(LrSchedule::Cyclical { lo: 2.0, hi: 1.0, period: 2 }.validate().is_err());
}

#[test]
fn frozen_parameters_get_no_state_and_stay_put() {
    let (train, dev) = desk_data(5, 60);
    let mut cfg = TrainConfig::desk(5);
    cfg.fine_tune_mode = FineTuneMode::Iterative;
    let mut tr = Trainer::new(cfg, &train, &dev).unwrap();
    tr.prepare_epoch(0).unwrap();
    let before: Vec<Vec<u32>> = tr.model.bert_sentiment.parameters("").iter().map(|(_, t, _)| bits(&t.to_vec())).collect();
    let head_before = bits(&tr.model.sentiment_head.parameters("")[0].1.to_vec());
    let batch = tr.train.get(Task::Sst).unwrap().batches(None).unwrap().remove(0);
    tr.task_step(0, Task::Sst, &batch).unwrap();
    tr.task_step(0, Task::Sst, &batch).unwrap();

    let opt = tr.opts.get(Task::Sst);
    for (_, t, _) in tr.model.bert_sentiment.parameters("") {
        assert!(!opt.has_state(&t));
    }
    let after: Vec<Vec<u32>> = tr.model.bert_sentiment.parameters("").iter().map(|(_, t, _)| bits(&t.to_vec())).collect();
    assert_eq!(before, after);
    let (_, head_w, _) = &tr.model.sentiment_head.parameters("")[0];
    assert_ne!(head_before, bits(&head_w.to_vec()));
    assert_eq!(opt.step_count(head_w), Some(2));

    let trainable: u64 = opt.params().iter().filter(|(_, t)| t.requires_grad()).map(|(_, t)| t.numel() as u64).sum();
    assert_eq!(opt.state_bytes(), Optimizer::planned_state_bytes(OptimKind::Adamax, trainable));
}

#[test]
fn lora_state_is_a_sliver_of_full_state_on_bert_base() {
    let enc = EncoderConfig::bert_base();
    let full = enc.count_parameters(ParamFilter::All);
    let plan = plan_injection(&enc, &AdapterConfig::new(1, AdapterMode::AttnOnly, false).unwrap());
    assert_eq!(plan.trainable_backbone, 55_296);
    let lora = Optimizer::planned_state_bytes(OptimKind::Adamax, plan.trainable_backbone);
    let dense = Optimizer::planned_state_bytes(OptimKind::Adamax, full);
    assert!((lora as f64) < 0.002 * dense as f64, "{lora} vs {dense}");
    assert_eq!(Optimizer::planned_state_bytes(OptimKind::Sgd, full), 0);
}

#[test]
fn ema_recurrence_and_isolation() {
    let p = Tensor::param(vec![3.0, -1.0], &[2]).unwrap();
    let live = minbert_peft::nn::Linear {
        weight: p.clone(),
        bias: Tensor::param(vec![0.5], &[1]).unwrap(),
        adapter: None,
    };
    let mut ema = Ema::new(&live, 0.5).unwrap();
    p.with_data_mut(|d| d.copy_from_slice(&[5.0, 1.0]));
    ema.update(&live).unwrap();
    assert_eq!(ema.shadow()[0].2, vec![4.0, 0.0]);

    let copy = minbert_peft::nn::Linear {
        weight: p.deep_clone(),
        bias: live.bias.deep_clone(),
        adapter: None,
    };
    ema.apply(&copy).unwrap();
    assert_eq!(copy.weight.to_vec(), vec![4.0, 0.0]);
    assert_eq!(p.to_vec(), vec![5.0, 1.0]);

    let mut zero = Ema::new(&live, 0.0).unwrap();
    p.with_data_mut(|d| d.copy_from_slice(&[7.0, 7.0]));
    zero.update(&live).unwrap();
    assert_eq!(zero.shadow()[0].2, vec![7.0, 7.0]);

    let mut one = Ema::new(&live, 1.0).unwrap();
    p.with_data_mut(|d| d.copy_from_slice(&[-2.0, 9.0]));
    one.update(&live).unwrap();
    assert_eq!(one.shadow()[0].2, vec![7.0, 7.0]);

    let other = minbert_peft::nn::Linear {
        weight: Tensor::param(vec![0.0; 3], &[3]).unwrap(),
        bias: Tensor::param(vec![0.0], &[1]).unwrap(),
        adapter: None,
    };
    assert!(ema.update(&other).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn adamax_first_step_ignores_gradient_scale(
        g in proptest::collection::vec(-5.0f64..5.0, 1..16),
        c in 0.01f64..100.0,
    ) {
        prop_assume!(g.iter().all(|x| x.abs() > 1e-3));
        let h = Hyper::new(0.1);
        let run = |grads: &[f64]| {
            let mut theta = vec![0.0f64; grads.len()];
            let (mut m, mut u) = (vec![0.0; grads.len()], vec![0.0; grads.len()]);
            adamax_kernel(&mut theta, grads, &mut m, &mut u, 1, &h);
            theta
        };
        let scaled: Vec<f64> = g.iter().map(|x| x * c).collect();
        for (a, b) in run(&g).iter().zip(run(&scaled)) {
            prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn adamax_denominator_is_monotone_under_growing_gradients(
        steps in proptest::collection::vec(0.0f64..3.0, 2..20),
    ) {
        let h = Hyper::new(1e-3);
        let (mut theta, mut m, mut u) = (vec![0.0f64], vec![0.0], vec![0.0]);
        let mut g = 0.1f64;
        let mut prev = 0.0;
        for (t, inc) in steps.iter().enumerate() {
            // Keep |g| >= beta2 * u so the max never decays.
            g += inc;
            adamax_kernel(&mut theta, &[g], &mut m, &mut u, t as u64 + 1, &h);
            prop_assert!(u[0] >= 0.0 && u[0] >= prev);
            prev = u[0];
        }
    }
}
