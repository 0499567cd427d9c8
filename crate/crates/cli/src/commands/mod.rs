mod analyze;
mod factorize;
mod import;
mod init;
mod merge;
mod train_toy;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrqr_lora::Matrix;

use crate::error::CliResult;
use crate::{Cli, Command};

pub use analyze::analyze;
pub use factorize::factorize;
pub use import::import;
pub use init::{init, InitOptions};
pub use merge::merge;
pub use train_toy::{load_config, train_toy, RunMeta};

/// Number of random input columns used by `--verify` probes.
pub const PROBES: usize = 100;
pub const INIT_TOL: f64 = 1e-12;
pub const MERGE_TOL: f64 = 1e-10;
pub const FACTOR_TOL: f64 = 1e-10;

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Import { out, layers } => import(layers, out, cli.csv),
        Command::Factorize { input, out } => factorize(input, out, cli.verify, cli.csv),
        Command::Init {
            checkpoint,
            r_main,
            r_sub,
            strategy,
        } => init(
            checkpoint,
            &InitOptions {
                r_main: *r_main,
                r_sub: *r_sub,
                strategy: *strategy,
                seed,
                verify: cli.verify,
                csv: cli.csv,
            },
        ),
        Command::Analyze {
            checkpoint,
            report,
            heatmaps,
        } => analyze(checkpoint, report, heatmaps.as_deref()),
        Command::TrainToy { config, out } => train_toy(config.as_deref(), out, cli.seed, cli.csv),
        Command::Merge { checkpoint, out } => merge(checkpoint, out, seed, cli.verify, cli.csv),
    }
}

/// Seeded `rows × PROBES` inputs in `[-1, 1)`.
pub fn probe_inputs(rows: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, PROBES, |_, _| rng.random_range(-1.0..1.0))
}
