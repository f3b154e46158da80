//! Central finite-difference gradient checks against the autodiff tape.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::optim::{Bindings, ParamStore};
use super::tape::{NodeId, Tape};
use crate::error::Result;

/// Groups whose true gradient is identically zero (a key bias under softmax
/// shift invariance, say) still carry finite-difference rounding noise of
/// order 1e-10; below this norm the error is measured against the floor.
pub const NORM_FLOOR: f64 = 1e-5;

/// Per-parameter-group comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub entries_checked: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, NORM_FLOOR)` over
    /// the checked entries.
    pub relative_error: f64,
}

/// Compares tape gradients of a scalar loss with central differences.
///
/// `build` must construct the loss from the bindings it is given (one per
/// store, in order). At most `max_entries` randomly chosen entries are
/// checked per parameter; pass `usize::MAX` to check everything.
pub fn check_gradients<R, F>(
    stores: &[&ParamStore],
    build: F,
    step: f64,
    max_entries: usize,
    rng: &mut R,
) -> Result<Vec<GroupCheck>>
where
    R: Rng + ?Sized,
    F: Fn(&mut Tape, &[Bindings]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let bindings: Vec<Bindings> = stores.iter().map(|s| s.bind(&mut tape)).collect();
    let loss = build(&mut tape, &bindings)?;
    let grads = tape.backward(loss)?;

    let eval = |stores: &[ParamStore]| -> Result<f64> {
        let mut t = Tape::new();
        let b: Vec<Bindings> = stores.iter().map(|s| s.bind_constant(&mut t)).collect();
        let l = build(&mut t, &b)?;
        Ok(t.value(l).item())
    };

    let mut scratch: Vec<ParamStore> = stores.iter().map(|s| (*s).clone()).collect();
    let mut out = Vec::new();
    for (si, store) in stores.iter().enumerate() {
        for (name, value) in store.iter() {
            let analytic = grads.get(bindings[si].id(name));
            let len = value.data().len();
            let picks: Vec<usize> = if len <= max_entries {
                (0..len).collect()
            } else {
                let mut v = sample(rng, len, max_entries).into_vec();
                v.sort_unstable();
                v
            };
            let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
            for &k in &picks {
                let orig = value.data()[k];
                scratch[si].get_mut(name).expect("same names").data_mut()[k] = orig + step;
                let plus = eval(&scratch)?;
                scratch[si].get_mut(name).expect("same names").data_mut()[k] = orig - step;
                let minus = eval(&scratch)?;
                scratch[si].get_mut(name).expect("same names").data_mut()[k] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                let a = analytic.data()[k];
                diff2 += (a - numeric) * (a - numeric);
                a2 += a * a;
                n2 += numeric * numeric;
            }
            let denom = a2.sqrt().max(n2.sqrt()).max(NORM_FLOOR);
            let relative_error = diff2.sqrt() / denom;
            out.push(GroupCheck {
                group: name.to_string(),
                entries_checked: picks.len(),
                relative_error,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Every tape op in one composite loss, checked on many seeds.
    #[test]
    fn composite_ops_match_finite_differences() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            store.insert("a", Matrix::random_normal(3, 4, 1.0, &mut rng));
            store.insert("b", Matrix::random_normal(4, 4, 1.0, &mut rng));
            store.insert("r", Matrix::random_normal(1, 4, 1.0, &mut rng));
            store.insert("g", Matrix::random_normal(1, 4, 1.0, &mut rng));
            let checks = check_gradients(
                &[&store],
                |t, b| {
                    let (a, w, r, g) = (b[0].id("a"), b[0].id("b"), b[0].id("r"), b[0].id("g"));
                    let h = t.matmul(a, w);
                    let h = t.add_row(h, r);
                    let h = t.gelu(h);
                    let h = t.layer_norm(h, 1e-12);
                    let h = t.mul_row(h, g);
                    let s = t.matmul_t(h, a);
                    let s = t.scale(s, 0.5);
                    let p = t.row_softmax(s);
                    let p = t.mask_renormalize(p, &[true, false, true]);
                    let mix = t.matmul(p, h);
                    let left = t.slice_cols(mix, 0, 2);
                    let right = t.slice_cols(mix, 2, 2);
                    let cat = t.concat_cols(&[right, left]);
                    let stacked = t.concat_rows(&[cat, cat]);
                    let picked = t.select_rows(stacked, &[0, 4, 4]);
                    let tr = t.transpose(picked);
                    let sq = t.hadamard(tr, tr);
                    let rs = t.row_sums(sq);
                    let d = t.sub(rs, rs);
                    let e = t.add(d, rs);
                    let ce_in = t.transpose(e);
                    let ce = t.cross_entropy(ce_in, &[1]);
                    let total = t.sum_all(picked);
                    Ok(t.add(ce, total))
                },
                1e-5,
                usize::MAX,
                &mut rng,
            )
            .unwrap();
            for c in checks {
                assert!(
                    c.relative_error <= 1e-4,
                    "seed {seed} group {} err {}",
                    c.group,
                    c.relative_error
                );
            }
        }
    }
}
