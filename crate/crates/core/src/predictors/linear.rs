use crate::context::{check_block_origin, CanvasView, ContextPair, CONTEXT_SIZE};
use crate::error::Result;
use crate::mosaic::{max_sample, BayerPhase};

use super::{PredictionBlock, Predictor, PredictorId};

/// Median edge detector on same-channel neighbours.
#[inline]
pub fn med(w: i32, n: i32, nw: i32) -> i32 {
    let (lo, hi) = if w < n { (w, n) } else { (n, w) };
    if nw >= hi {
        lo
    } else if nw <= lo {
        hi
    } else {
        w + n - nw
    }
}

#[inline]
fn bound(v: i32, bit_depth: u8) -> u16 {
    v.clamp(0, max_sample(bit_depth) as i32) as u16
}

/// MED prediction of all four block samples. Neighbours sit two samples away
/// (same Bayer channel) and all fall inside the contexts, so the phase does
/// not enter the rule.
pub fn predict_linear(ctx: &ContextPair, _phase: BayerPhase, bit_depth: u8) -> PredictionBlock {
    // Local coordinates of block sample (dy, dx):
    //   W  = left[dy + 62][dx + 62]
    //   N  = top [dy + 62][dx + 62]
    //   NW = top [dy + 62][dx + 60]
    let k = CONTEXT_SIZE - 2;
    let mut values = [[0u16; 2]; 2];
    for (dy, row) in values.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let w = ctx.left_at(dy + k, dx + k) as i32;
            let n = ctx.top_at(dy + k, dx + k) as i32;
            let nw = ctx.top_at(dy + k, dx + k - 2) as i32;
            *v = bound(med(w, n, nw), bit_depth);
        }
    }
    PredictionBlock { values }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LinearPredictor;

impl Predictor for LinearPredictor {
    fn id(&self) -> PredictorId {
        PredictorId::LINEAR
    }

    fn predict(&self, ctx: &ContextPair, phase: BayerPhase, bit_depth: u8) -> Result<PredictionBlock> {
        Ok(predict_linear(ctx, phase, bit_depth))
    }

    /// Reads the three neighbours straight from the canvas instead of copying
    /// both 64x64 windows.
    fn predict_at(&self, canvas: &CanvasView<'_>, origin: (usize, usize)) -> Result<PredictionBlock> {
        check_block_origin(canvas, origin)?;
        let (r, c) = origin;
        let mut values = [[0u16; 2]; 2];
        for (dy, row) in values.iter_mut().enumerate() {
            for (dx, v) in row.iter_mut().enumerate() {
                let (y, x) = (r + dy, c + dx);
                let w = canvas.get(y, x - 2) as i32;
                let n = canvas.get(y - 2, x) as i32;
                let nw = canvas.get(y - 2, x - 2) as i32;
                *v = bound(med(w, n, nw), canvas.bit_depth);
            }
        }
        Ok(PredictionBlock { values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::extract_context_pair;
    use crate::mosaic::{pad_zero, MosaicImage};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn med_rules() {
        assert_eq!(med(10, 20, 5), 20);
        assert_eq!(med(10, 20, 30), 10);
        assert_eq!(med(10, 20, 15), 15);
        assert_eq!(med(7, 7, 7), 7);
    }

    fn ctx_with(w: u16, n: u16, nw: u16) -> ContextPair {
        let mut ctx = ContextPair {
            top: vec![0; CONTEXT_SIZE * CONTEXT_SIZE],
            left: vec![0; CONTEXT_SIZE * CONTEXT_SIZE],
            block_origin: (64, 64),
        };
        for dy in 0..2 {
            for dx in 0..2 {
                ctx.left[(62 + dy) * 64 + 62 + dx] = w;
                ctx.top[(62 + dy) * 64 + 62 + dx] = n;
                ctx.top[(62 + dy) * 64 + 60 + dx] = nw;
            }
        }
        ctx
    }

    #[test]
    fn gradient_rule_and_clamp() {
        // W=10, N=20, NW=5: NW <= min -> max(W,N) = 20 under MED
        assert_eq!(predict_linear(&ctx_with(10, 20, 5), BayerPhase::Rggb, 8), PredictionBlock::splat(20));
        // min rule
        assert_eq!(predict_linear(&ctx_with(10, 20, 30), BayerPhase::Rggb, 8), PredictionBlock::splat(10));
        // planar case W+N-NW
        assert_eq!(predict_linear(&ctx_with(10, 20, 12), BayerPhase::Rggb, 8), PredictionBlock::splat(18));
        // W + N - NW above range is clamped
        assert_eq!(med(250, 255, 251), 254);
        assert_eq!(bound(300, 8), 255);
        assert_eq!(bound(-4, 8), 0);
    }

    #[test]
    fn constant_contexts_predict_constant() {
        let ctx = ContextPair { top: vec![77; 4096], left: vec![77; 4096], block_origin: (64, 64) };
        assert_eq!(predict_linear(&ctx, BayerPhase::Gbrg, 10), PredictionBlock::splat(77));
    }

    #[test]
    fn direct_route_matches_context_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for phase in BayerPhase::ALL {
            let (w, h) = (18, 14);
            let s = (0..w * h).map(|_| rng.gen_range(0..16384)).collect();
            let img = pad_zero(&MosaicImage::new(w, h, 14, phase, s).unwrap(), 64).unwrap();
            for r in (64..img.height()).step_by(2) {
                for c in (64..img.width()).step_by(2) {
                    let ctx = extract_context_pair(&img, (r, c)).unwrap();
                    let a = LinearPredictor.predict(&ctx, phase, 14).unwrap();
                    let b = LinearPredictor.predict_at(&img.view(), (r, c)).unwrap();
                    assert_eq!(a, b);
                }
            }
        }
    }
}
