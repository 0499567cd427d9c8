use std::path::Path;

use rrqr_lora::linalg::rrqr;
use rrqr_lora::Matrix;

use super::FACTOR_TOL;
use crate::error::{CliError, CliResult};
use crate::files::{read_matrix, write_json, write_matrix};

const SHOWN: usize = 8;

pub fn factorize(input: &Path, out: &Path, verify: bool, csv: bool) -> CliResult<()> {
    let w = read_matrix(input, csv)?;
    let fac = rrqr(&w)?;
    write_matrix(&out.join("q.rlmx"), &fac.q, csv)?;
    write_matrix(&out.join("r.rlmx"), &fac.r, csv)?;
    write_json(&out.join("perm.json"), &fac.perm)?;

    let diag = fac.diagonal();
    let m = diag.len();
    let top = diag[0];
    let rank = diag.iter().filter(|&&v| v > top * m as f64 * f64::EPSILON).count();
    println!("{}x{}: {m} pivots, numerical rank {rank}", w.rows(), w.cols());
    let head: Vec<String> = diag.iter().take(SHOWN).map(|v| format!("{v:.6e}")).collect();
    let more = if m > SHOWN { ", ..." } else { "" };
    println!("diag(R): [{}{more}]", head.join(", "));
    println!("|r_11| = {:.6e}, |r_mm| = {:.6e}", top, diag[m - 1]);

    if verify {
        let scale = w.frobenius_norm().max(f64::MIN_POSITIVE);
        let resid = fac.reconstruct().sub(&w)?.frobenius_norm() / scale;
        let gram = fac.q.t_matmul(&fac.q)?;
        let ortho = gram.sub(&Matrix::identity(m))?.frobenius_norm();
        println!("reconstruction residual (relative): {resid:e}");
        println!("orthogonality error: {ortho:e}");
        if resid > FACTOR_TOL || ortho > FACTOR_TOL {
            return Err(CliError::data(format!(
                "verification failed: tolerance is {FACTOR_TOL:e}"
            )));
        }
    }
    Ok(())
}
