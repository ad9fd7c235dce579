//! Point attention pooling: turns the variable set of points inside each
//! proposal box into one fixed-width appearance feature by averaging a
//! learned pair interaction over all ordered point pairs.
//!
//! The learnable budget is deliberately tiny: per-proposal gain vectors
//! (K_c rows of widths d_s, d_l, d2) modulating fixed random projections.
//! That keeps the trainable count at exactly `K_c * (d2 + d_s + d_l)` with
//! no bias terms, which [`pooling_param_count`] asserts.

use rand_chacha::ChaCha12Rng;
use rand::seq::SliceRandom;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::OrientedBox;
use crate::model::Ctx;
use crate::params::{init_linear, ParamStore};
use crate::tensor::{Matrix, Var};

/// Fixed-size point sample for one proposal: seed indices plus their
/// mean-centered coordinates. Rows may repeat when the box holds fewer
/// than the requested count.
#[derive(Debug, Clone)]
pub struct InteriorSample {
    pub seed_idx: Vec<usize>,
    /// Coordinates shifted by the sample mean; zero-mean by construction.
    pub canon_xyz: Vec<[f64; 3]>,
}

/// Picks `n_r` points inside the box from `seed_xyz`, without replacement
/// and cycle-repeated when fewer exist. Falls back to `fallback` (the
/// proposal's cluster members) when the box contains no seed at all.
pub fn sample_interior(
    bbox: &OrientedBox,
    seed_xyz: &[[f64; 3]],
    fallback: &[usize],
    n_r: usize,
    rng: &mut ChaCha12Rng,
) -> Result<InteriorSample> {
    assert!(n_r >= 1);
    let mut cand: Vec<usize> = (0..seed_xyz.len())
        .filter(|&i| bbox.contains(seed_xyz[i]))
        .collect();
    if cand.is_empty() {
        cand = fallback.to_vec();
        cand.sort_unstable();
        cand.dedup();
    }
    if cand.is_empty() {
        return Err(Error::shape("sample_interior", "no interior points and no fallback"));
    }
    cand.shuffle(rng);
    cand.truncate(n_r);
    let base = cand.len();
    for i in base..n_r {
        let again = cand[i % base];
        cand.push(again);
    }
    let mut mean = [0.0f64; 3];
    for &i in &cand {
        for (m, &x) in mean.iter_mut().zip(&seed_xyz[i]) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n_r as f64;
    }
    let canon_xyz = cand
        .iter()
        .map(|&i| {
            [
                seed_xyz[i][0] - mean[0],
                seed_xyz[i][1] - mean[1],
                seed_xyz[i][2] - mean[2],
            ]
        })
        .collect();
    Ok(InteriorSample { seed_idx: cand, canon_xyz })
}

/// Trainable parameters: `K_c * (d2 + d_s + d_l)`, bias-free.
pub fn pooling_param_count(cfg: &ModelConfig) -> usize {
    cfg.num_proposals * (cfg.d_appearance + cfg.d_semantic + cfg.d_layout)
}

pub fn register(store: &mut ParamStore, cfg: &ModelConfig) -> Result<()> {
    let d1 = cfg.d_seed();
    let (kc, ds, dl, d2) = (
        cfg.num_proposals,
        cfg.d_semantic,
        cfg.d_layout,
        cfg.d_appearance,
    );
    store.get_or_init_shaped("pool/sem_gain", kc, ds, true, |_| Matrix::full(kc, ds, 1.0))?;
    store.get_or_init_shaped("pool/spa_gain", kc, dl, true, |_| Matrix::full(kc, dl, 1.0))?;
    store.get_or_init_shaped("pool/out_gain", kc, d2, true, |_| Matrix::full(kc, d2, 1.0))?;
    // Fixed random projections; excluded from the trainable census.
    store.get_or_init_shaped("pool/proj_sem", ds, 2 * d1, false, |r| {
        init_linear(r, ds, 2 * d1)
    })?;
    store.get_or_init_shaped("pool/proj_spa", dl, 12, false, |r| init_linear(r, dl, 12))?;
    store.get_or_init_shaped("pool/proj_out", d2, ds + dl, false, |r| {
        init_linear(r, d2, ds + dl)
    })?;
    Ok(())
}

/// Pools every proposal's interior sample into one appearance row.
///
/// `dirs` and `feat` are the per-seed direction and refined-feature
/// matrices; `samples` indexes into them. Returns [K_c, d2].
///
/// Sample rows are re-sorted by (coords, index) before pairing, so any
/// permutation of a sample's rows yields a bit-identical result.
pub fn pool(
    ctx: &mut Ctx,
    samples: &[InteriorSample],
    dirs: Var,
    feat: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    let kc = samples.len();
    if kc != cfg.num_proposals {
        return Err(Error::shape(
            "pool",
            format!("{kc} samples for {} proposals", cfg.num_proposals),
        ));
    }
    let nr = samples[0].seed_idx.len();
    let d1 = cfg.d_seed();

    let mut flat = Vec::with_capacity(kc * nr);
    let mut canon = Matrix::zeros(kc * nr, 3);
    for (m, s) in samples.iter().enumerate() {
        if s.seed_idx.len() != nr || s.canon_xyz.len() != nr {
            return Err(Error::shape("pool", format!("sample {m} is not {nr} rows")));
        }
        let mut order: Vec<usize> = (0..nr).collect();
        order.sort_by(|&a, &b| {
            let (ca, cb) = (&s.canon_xyz[a], &s.canon_xyz[b]);
            ca.partial_cmp(cb)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(s.seed_idx[a].cmp(&s.seed_idx[b]))
        });
        for (slot, &i) in order.iter().enumerate() {
            flat.push(s.seed_idx[i]);
            for c in 0..3 {
                canon.set(m * nr + slot, c, s.canon_xyz[i][c]);
            }
        }
    }

    let canon = ctx.tape.leaf(canon);
    let v_rows = ctx.tape.gather_rows(dirs, &flat)?;
    let l = ctx.tape.concat_cols(&[canon, v_rows])?;
    let s_rows = ctx.tape.gather_rows(feat, &flat)?;
    if ctx.tape.value(s_rows).cols() != d1 {
        return Err(Error::shape(
            "pool",
            format!("feature width {} != {d1}", ctx.tape.value(s_rows).cols()),
        ));
    }

    // Ordered pairs (i, j) within each proposal block, self-pairs included.
    let np = nr * nr;
    let mut pi = Vec::with_capacity(kc * np);
    let mut pj = Vec::with_capacity(kc * np);
    let mut prop = Vec::with_capacity(kc * np);
    for m in 0..kc {
        for i in 0..nr {
            for j in 0..nr {
                pi.push(m * nr + i);
                pj.push(m * nr + j);
                prop.push(m);
            }
        }
    }

    let s_i = ctx.tape.gather_rows(s_rows, &pi)?;
    let s_j = ctx.tape.gather_rows(s_rows, &pj)?;
    let sem_pair = ctx.tape.concat_cols(&[s_i, s_j])?;
    let l_i = ctx.tape.gather_rows(l, &pi)?;
    let l_j = ctx.tape.gather_rows(l, &pj)?;
    let spa_pair = ctx.tape.concat_cols(&[l_i, l_j])?;

    let proj_sem = ctx.bind("pool/proj_sem")?;
    let sem_lin = ctx.tape.matmul_nt(sem_pair, proj_sem)?;
    let sem_gain = ctx.bind("pool/sem_gain")?;
    let sem_g = ctx.tape.gather_rows(sem_gain, &prop)?;
    let sem_mod = ctx.tape.mul(sem_lin, sem_g)?;
    let h_sem = ctx.tape.relu(sem_mod)?;

    let proj_spa = ctx.bind("pool/proj_spa")?;
    let spa_lin = ctx.tape.matmul_nt(spa_pair, proj_spa)?;
    let spa_gain = ctx.bind("pool/spa_gain")?;
    let spa_g = ctx.tape.gather_rows(spa_gain, &prop)?;
    let spa_mod = ctx.tape.mul(spa_lin, spa_g)?;
    let h_spa = ctx.tape.relu(spa_mod)?;

    let cat = ctx.tape.concat_cols(&[h_sem, h_spa])?;
    let proj_out = ctx.bind("pool/proj_out")?;
    let out_lin = ctx.tape.matmul_nt(cat, proj_out)?;
    let out_gain = ctx.bind("pool/out_gain")?;
    let out_g = ctx.tape.gather_rows(out_gain, &prop)?;
    let out_mod = ctx.tape.mul(out_lin, out_g)?;
    let h = ctx.tape.relu(out_mod)?;

    ctx.tape.block_mean(h, np)
}
