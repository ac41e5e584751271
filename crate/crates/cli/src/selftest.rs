//! Gradient self-test: central differences against reverse mode on one
//! random episode through the configured architecture at 16x16, f64.

use rand::Rng;

use osr_core::{episode_grad_check, init_params, stream, EpisodeLayout, GradCheckOptions, Stream, Tensor};

use crate::config::RunConfig;
use crate::CliError;

pub const SELF_TEST_SIZE: usize = 16;

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let mut arch = cfg.arch()?;
    arch.input_size = SELF_TEST_SIZE;
    arch.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let tcfg = cfg.train()?;
    let seed = cfg.seed()?;
    let entries: usize = cfg.parsed("selftest_entries")?;
    let params = init_params::<f64>(&arch, seed)?;

    let k = tcfg.n_closed;
    let support: Vec<usize> = (0..k).collect();
    let query: Vec<usize> = (0..k).collect();
    let n_open = 2;
    let n = 2 * k + n_open;
    let mut rng = stream(seed, Stream::SelfTest);
    let pixels = (0..n * SELF_TEST_SIZE * SELF_TEST_SIZE).map(|_| rng.random_range(0.0..1.0)).collect();
    let images = Tensor::new(vec![n, SELF_TEST_SIZE, SELF_TEST_SIZE, 1], pixels)
        .map_err(|e| CliError::Numeric(e.to_string()))?;
    let layout = EpisodeLayout { k, support_labels: &support, query_labels: &query, n_open };
    let opts = GradCheckOptions { max_entries_per_leaf: (entries > 0).then_some(entries), ..GradCheckOptions::default() };
    let report = episode_grad_check(&params, &images, layout, &tcfg, &opts)?;
    println!(
        "self-test: {} entries checked, {} excluded at kinks, max relative error {:.3e} (tol {:.0e})",
        report.checked, report.excluded, report.max_rel_error, report.tol
    );
    if report.passed() {
        println!("self-test PASS");
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient self-test failed: max relative error {:.3e} exceeds {:.0e}",
            report.max_rel_error, report.tol
        )))
    }
}
