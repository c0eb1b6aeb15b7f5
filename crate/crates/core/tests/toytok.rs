mod common;

use common::{check_gradients, random_images, tiny_arch};
use robustlat::dataset::{generate, SyntheticSpec};
use robustlat::perturbation::{AnnealSchedule, AnnealShape, PerturbationSpec};
use robustlat::toytok::*;
use robustlat::{Codebook, TokenGrid, Tokenizer};

#[test]
fn gradients_match_central_differences() {
    // two single-patch images: two patches, K = 4, D = 2
    check_gradients(tiny_arch(), &random_images(2, 2, 13), &[(1, 0)]);
}

#[test]
fn gradients_match_central_differences_with_context() {
    let a = Architecture {
        side: 6,
        context: 1,
        ..tiny_arch()
    };
    check_gradients(a, &random_images(2, 6, 14), &[(0, 4), (1, 0), (1, 8)]);
}

#[test]
fn straight_through_passes_the_decoder_gradient_unchanged() {
    let a = Architecture {
        side: 8,
        patch: 4,
        latent_dim: 3,
        hidden: 6,
        codebook_size: 8,
        context: 0,
        ..tiny_arch()
    };
    let model = ToyTokenizer::init(a, 2).unwrap();
    let images = random_images(3, 8, 4);
    let mut used: Vec<TokenGrid> = images.iter().map(|im| model.tokenize(im).unwrap()).collect();
    used[0].indices[2] = 7;
    used[2].indices[0] = 5;
    let w = LossWeights {
        lambda_vq: 0.0,
        ..LossWeights::default()
    };
    let g = batch_gradients(&model, &images, &w, Some(&used)).unwrap();
    let expect: Vec<f64> = used
        .iter()
        .flat_map(|t| t.indices.iter().flat_map(|&k| model.codebook.row(k as usize).to_vec()))
        .collect();
    assert_eq!(g.decoder_input, expect);
    assert_eq!(g.latent_grad, g.decoder_input_grad);

    // with the VQ terms back, the encoder additionally receives the commitment pull
    let w = LossWeights::default();
    let g2 = batch_gradients(&model, &images, &w, Some(&used)).unwrap();
    let cells = 12.0;
    for (i, (lg, dg)) in g2.latent_grad.iter().zip(&g2.decoder_input_grad).enumerate() {
        let (cell, j) = (i / 3, i % 3);
        let e = model.codebook.row(g2.assignment[cell] as usize)[j];
        let commit = w.lambda_vq * w.commitment_weight * 2.0 * (g2.latent[i] - e) / cells;
        assert!((lg - dg - commit).abs() < 1e-15);
    }
}

#[test]
fn commitment_gradient_matches_finite_difference() {
    let cb = Codebook::new(2, 1, vec![0.0, 3.0]).unwrap();
    let loss = |z: &[f64]| -> f64 { z.iter().map(|&v| cb.nearest(&[v]).1).sum::<f64>() / z.len() as f64 };
    let z = [0.4, 2.2, 2.9];
    let h = 1e-5;
    for i in 0..z.len() {
        let mut p = z;
        p[i] += h;
        let up = loss(&p);
        p[i] -= 2.0 * h;
        let down = loss(&p);
        let e = cb.row(cb.nearest(&[z[i]]).0)[0];
        let analytic = 2.0 * (z[i] - e) / z.len() as f64;
        assert!(((up - down) / (2.0 * h) - analytic).abs() < 1e-8);
    }
}

fn overfit_config(steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        learning_rate: 0.5,
        lambda_rec: 1.0,
        lambda_vq: 1.0,
        commitment_weight: 0.25,
        perturbation: AnnealSchedule::disabled(seed),
        seed,
        eval_every: 100,
        dead_code_patience: 500,
    }
}

fn overfit_arch() -> Architecture {
    Architecture {
        side: 32,
        channels: 3,
        patch: 4,
        latent_dim: 8,
        hidden: 32,
        codebook_size: 64,
        context: 0,
        activation: Activation::Tanh,
    }
}

#[test]
fn overfits_eight_images() {
    let data = generate(&SyntheticSpec::new(8, 1, 3)).unwrap().images;
    let mut model = ToyTokenizer::init(overfit_arch(), 1).unwrap();
    model.init_codebook_from_data(&data, 1).unwrap();
    let (_, rep) = train(&data, TrainState::fresh(model), &overfit_config(2000, 1)).unwrap();
    assert!(
        rep.final_mse < 0.25 * rep.initial_mse,
        "mse {} -> {}",
        rep.initial_mse,
        rep.final_mse
    );
    assert_eq!(rep.curve.len(), 20);
}

#[test]
fn trailing_loss_decreases_for_every_seed() {
    let data = generate(&SyntheticSpec::new(8, 1, 3)).unwrap().images;
    for seed in [1, 2, 3] {
        let model = ToyTokenizer::init(overfit_arch(), seed).unwrap();
        let (_, rep) = train(&data, TrainState::fresh(model), &overfit_config(600, seed)).unwrap();
        assert!(
            rep.final_trailing_loss.unwrap() < rep.initial_trailing_loss.unwrap(),
            "seed {seed}"
        );
    }
}

fn perturbed_config(steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 10,
        perturbation: AnnealSchedule {
            initial: PerturbationSpec::new(1.0, 0.2, 5, 8),
            final_scale: 0.5,
            delta_final_scale: None,
            total_steps: steps,
            shape: AnnealShape::Linear,
        },
        dead_code_patience: 20,
        ..overfit_config(steps, 4)
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = generate(&SyntheticSpec::new(4, 5, 9)).unwrap().images;
    let run = || {
        let model = ToyTokenizer::init(overfit_arch(), 5).unwrap();
        let (st, mut rep) = train(&data, TrainState::fresh(model), &perturbed_config(60)).unwrap();
        rep.wall_clock_secs = 0.0;
        (st.to_bytes(), serde_json::to_string(&rep).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = generate(&SyntheticSpec::new(4, 5, 9)).unwrap().images;
    let cfg = perturbed_config(80);
    let init = TrainState::fresh(ToyTokenizer::init(overfit_arch(), 5).unwrap());
    let (full, _) = train(&data, init.clone(), &cfg).unwrap();

    let (half, _) = train(
        &data,
        init,
        &TrainConfig {
            steps: 33,
            ..cfg.clone()
        },
    )
    .unwrap();
    let restored = TrainState::from_bytes(&half.to_bytes()).unwrap();
    assert_eq!(restored, half);
    let (resumed, _) = train(&data, restored, &cfg).unwrap();
    assert_eq!(resumed.to_bytes(), full.to_bytes());
}

#[test]
fn perturbation_counts_follow_the_schedule() {
    let data = generate(&SyntheticSpec::new(4, 5, 9)).unwrap().images;
    let cfg = perturbed_config(40);
    let model = ToyTokenizer::init(overfit_arch(), 5).unwrap();
    let mut expected = 0u64;
    for step in 0..40 {
        let live = robustlat::anneal_at(&cfg.perturbation, step);
        let imgs = robustlat::perturbation::round_half_up(live.beta * 10.0) as u64;
        expected += imgs * robustlat::perturbation::perturbed_count(live.alpha, 64) as u64;
    }
    let (_, rep) = train(&data, TrainState::fresh(model), &cfg).unwrap();
    assert_eq!(rep.tokens_replaced, expected);
    assert_eq!(rep.images_perturbed, 2 * 40);
}

#[test]
fn dead_codewords_are_reseeded() {
    let data = generate(&SyntheticSpec::new(4, 5, 9)).unwrap().images;
    let model = ToyTokenizer::init(overfit_arch(), 5).unwrap();
    let (st, rep) = train(&data, TrainState::fresh(model), &perturbed_config(50)).unwrap();
    assert!(rep.codes_reseeded > 0);
    assert_eq!(rep.codes_reseeded, st.reseeded);
    assert!(st.idle.iter().all(|&i| i < 20));
}
