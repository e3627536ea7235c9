use augbpm::ive_hmm::{baum_welch, sample_sequences, BaumWelchOptions, Hmm};
use augbpm::seed::rng_from_seed;
use ndarray::{array, Array2};

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Row/column swap of a 2-state model.
fn relabel(hmm: &Hmm) -> Hmm {
    let t = &hmm.transition;
    Hmm::new(
        array![hmm.initial[1], hmm.initial[0]],
        array![[t[[1, 1]], t[[1, 0]]], [t[[0, 1]], t[[0, 0]]]],
        ndarray::stack![ndarray::Axis(0), hmm.emission.row(1), hmm.emission.row(0)],
    )
    .unwrap()
}

#[test]
fn recovers_two_state_parameters() {
    let truth = Hmm::new(
        array![0.6, 0.4],
        array![[0.85, 0.15], [0.25, 0.75]],
        array![[0.6, 0.25, 0.1, 0.05], [0.05, 0.15, 0.3, 0.5]],
    )
    .unwrap();
    let mut rng = rng_from_seed(2024);
    let data: Vec<Vec<usize>> = sample_sequences(&truth, 200, 100, &mut rng)
        .into_iter()
        .map(|s| s.observations)
        .collect();
    let start = Hmm::new(
        array![0.5, 0.5],
        array![[0.7, 0.3], [0.4, 0.6]],
        array![[0.4, 0.3, 0.2, 0.1], [0.1, 0.2, 0.3, 0.4]],
    )
    .unwrap();
    let fit = baum_welch(
        &start,
        &data,
        &BaumWelchOptions {
            max_iters: 500,
            tol: 1e-8,
            smoothing: 0.0,
        },
    )
    .unwrap();
    assert!(fit
        .log_likelihood_trace
        .windows(2)
        .all(|w| w[1] >= w[0] - 1e-9));

    let candidates = [fit.hmm.clone(), relabel(&fit.hmm)];
    let best = candidates
        .iter()
        .map(|h| {
            max_abs_diff(&h.transition, &truth.transition).max(max_abs_diff(&h.emission, &truth.emission))
        })
        .fold(f64::INFINITY, f64::min);
    assert!(best < 0.05, "max entrywise error {best}");
}
