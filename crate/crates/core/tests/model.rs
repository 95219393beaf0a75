use sampo_core::kernels::token_log_ratios;
use sampo_core::model::{backward, forward_logprobs, greedy_decode, init_params};
use sampo_core::rng::rng_for;
use sampo_core::{ModelShape, PolicyParams, TokenSeq};

fn seq(ids: &[u32]) -> TokenSeq {
    TokenSeq::new(ids.to_vec()).unwrap()
}

fn random_params(shape: ModelShape, seed: u64, scale: f64) -> PolicyParams {
    let mut rng = rng_for(seed, 1, 1);
    let values = (0..shape.param_count()).map(|_| rng.uniform(-scale, scale)).collect();
    PolicyParams::from_values(shape, values).unwrap()
}

fn random_tokens(rng: &mut sampo_core::RngStream, v: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.below(v as u64) as u32).collect()
}

#[test]
fn distributions_are_normalized_for_arbitrary_params() {
    for case in 0..50 {
        let mut rng = rng_for(2, 0, case);
        let v = rng.range_inclusive(2, 12);
        let shape = ModelShape::new(v, rng.range_inclusive(1, 3), rng.range_inclusive(1, 5)).unwrap();
        let params = random_params(shape, case, 3.0);
        for len in 0..6 {
            let hist = random_tokens(&mut rng, v, len);
            let lp = params.next_token_logprobs(&hist);
            let total: f64 = lp.iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(lp.iter().all(|&l| l <= 0.0));
        }
    }
}

#[test]
fn fresh_params_are_near_uniform() {
    let v = 50;
    let params = init_params(v, 2, 7).unwrap();
    let uniform = (v as f64).ln();
    let mut rng = rng_for(3, 0, 0);
    for len in 0..40 {
        let hist = random_tokens(&mut rng, v, len % 4);
        let lp = params.next_token_logprobs(&hist);
        let entropy: f64 = -lp.iter().map(|&l| l.exp() * l).sum::<f64>();
        assert!((entropy - uniform).abs() < 0.01 * uniform, "entropy {entropy}");
    }
}

#[test]
fn cloned_reference_gives_zero_ratios() {
    let params = init_params(10, 2, 3).unwrap();
    let reference = params.clone();
    let (p, r) = (seq(&[1, 2]), seq(&[3, 4, 5, 9]));
    let a = forward_logprobs(&params, &p, &r).unwrap();
    let b = forward_logprobs(&reference, &p, &r).unwrap();
    assert_eq!(a, b);
    assert!(token_log_ratios(&a, &b).unwrap().values().iter().all(|&x| x == 0.0));
}

#[test]
fn backward_matches_central_differences() {
    let h = 1e-5;
    for case in 0..120 {
        let mut rng = rng_for(4, 0, case);
        let v = rng.range_inclusive(2, 6);
        let shape = ModelShape::new(v, rng.range_inclusive(1, 2), rng.range_inclusive(1, 4)).unwrap();
        let params = random_params(shape, 100 + case, 1.0);
        let plen = rng.range_inclusive(1, 3);
        let rlen = rng.range_inclusive(1, 5);
        let prompt = TokenSeq::new(random_tokens(&mut rng, v, plen)).unwrap();
        let response = TokenSeq::new(random_tokens(&mut rng, v, rlen)).unwrap();
        let upstream: Vec<f64> = (0..response.len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let objective = |p: &PolicyParams| {
            let lp = forward_logprobs(p, &prompt, &response).unwrap();
            lp.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
        };
        let analytic = backward(&params, &prompt, &response, &upstream).unwrap();
        let mut numeric = vec![0.0; params.param_count()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut up = params.clone();
            up.values_mut()[i] += h;
            let mut down = params.clone();
            down.values_mut()[i] -= h;
            *slot = (objective(&up) - objective(&down)) / (2.0 * h);
        }
        let diff: f64 = analytic.values().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm = analytic.l2_norm().max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt()).max(1e-12);
        assert!(diff / norm <= 1e-5, "case {case}: relative error {}", diff / norm);
    }
}

#[test]
fn single_token_gradient_matches_softmax_jacobian() {
    // V = 3, order 1, d = 2: E is 4×2 (row 3 is padding), W is 3×2, b is 3.
    let shape = ModelShape::new(3, 1, 2).unwrap();
    let e = [[0.5, -0.2], [0.1, 0.3], [-0.4, 0.2], [0.05, 0.15]];
    let w = [[0.3, -0.6], [0.2, 0.4], [-0.5, 0.1]];
    let b = [0.1, -0.2, 0.05];
    let mut values: Vec<f64> = e.iter().flatten().copied().collect();
    values.extend(w.iter().flatten());
    values.extend(b);
    let params = PolicyParams::from_values(shape, values).unwrap();
    let (prompt, target, u) = (1usize, 2usize, 0.7);

    let hid = e[prompt];
    let logits: Vec<f64> = (0..3).map(|i| b[i] + w[i][0] * hid[0] + w[i][1] * hid[1]).collect();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    let p: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
    let dlogit: Vec<f64> = (0..3).map(|i| u * (if i == target { 1.0 } else { 0.0 } - p[i])).collect();

    let mut expect = vec![0.0; shape.param_count()];
    for k in 0..2 {
        expect[prompt * 2 + k] = (0..3).map(|i| dlogit[i] * w[i][k]).sum();
    }
    for i in 0..3 {
        for k in 0..2 {
            expect[8 + i * 2 + k] = dlogit[i] * hid[k];
        }
        expect[14 + i] = dlogit[i];
    }
    let got = backward(&params, &seq(&[prompt as u32]), &seq(&[target as u32]), &[u]).unwrap();
    for (i, (a, b)) in got.values().iter().zip(&expect).enumerate() {
        assert!((a - b).abs() < 1e-14, "param {i}: {a} vs {b}");
    }
    let lp = forward_logprobs(&params, &seq(&[prompt as u32]), &seq(&[target as u32])).unwrap();
    assert!((lp[0] - p[target].ln()).abs() < 1e-14);
}

#[test]
fn stop_biased_model_decodes_one_token() {
    let shape = ModelShape::new(6, 2, 3).unwrap();
    let mut params = PolicyParams::zeros(shape);
    let n = params.param_count();
    params.values_mut()[n - 1] = 5.0;
    let out = greedy_decode(&params, &seq(&[0, 1]), 10, 5).unwrap();
    assert_eq!(out.ids(), &[5]);
    assert_eq!(greedy_decode(&params, &seq(&[0, 1]), 10, 5).unwrap(), out);
}

#[test]
fn corpus_fit_model_decodes_label_lengths() {
    // Counting chains: prompt [a] is followed by a+1, …, 8 and then stop.
    let (v, stop) = (10usize, 9u32);
    let data: Vec<(TokenSeq, TokenSeq)> = (0..8u32)
        .map(|a| {
            let mut r: Vec<u32> = (a + 1..=8).collect();
            r.push(stop);
            (seq(&[a]), TokenSeq::new(r).unwrap())
        })
        .collect();
    let shape = ModelShape::new(v, 2, 8).unwrap();
    let mut params = PolicyParams::init(shape, 11).unwrap();
    for _ in 0..400 {
        for (p, r) in &data {
            let upstream = vec![-1.0; r.len()];
            let g = backward(&params, p, r, &upstream).unwrap();
            for (x, gx) in params.values_mut().iter_mut().zip(g.values()) {
                *x -= 0.2 * gx;
            }
        }
    }
    let label_mean = data.iter().map(|(_, r)| (r.len() - 1) as f64).sum::<f64>() / data.len() as f64;
    let decoded_mean = data
        .iter()
        .map(|(p, _)| {
            let out = greedy_decode(&params, p, 20, stop).unwrap();
            out.ids().iter().take_while(|&&t| t != stop).count() as f64
        })
        .sum::<f64>()
        / data.len() as f64;
    assert!(
        (decoded_mean - label_mean).abs() <= 0.2 * label_mean,
        "decoded {decoded_mean} vs labels {label_mean}"
    );
}
