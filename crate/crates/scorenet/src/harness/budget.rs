//! Attention-cost accounting.
//!
//! The quadratic term of transformer attention is the number of
//! query/key pairs per layer, so comparing architectures reduces to
//! comparing patch-pair counts. The two-stage model replaces one
//! full-resolution attention of ((H/P_a)(W/P_a))^2 pairs with a
//! downscaled scorer, K small local encoders, and a K-token aggregator,
//! which is where its throughput advantage comes from.

use crate::error::{Error, Result};
use crate::model::{ScoreNetConfig, StagePairCounts};

/// Patch-pair counts of the baseline and of each stage of the two-stage
/// model at a given input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenBudget {
    /// Single-scale baseline over the full-resolution grid.
    pub vanilla: u64,
    pub scorer: u64,
    pub local: u64,
    pub coarse: u64,
}

impl TokenBudget {
    pub fn two_stage_total(&self) -> u64 {
        self.scorer + self.local + self.coarse
    }

    pub fn stage_counts(&self) -> StagePairCounts {
        StagePairCounts { scorer: self.scorer, local: self.local, coarse: self.coarse }
    }
}

fn require_divisible(value: usize, by: usize, what: &str) -> Result<()> {
    if by == 0 || value % by != 0 {
        return Err(Error::shape(format!("{what}: {value} not divisible by {by}")));
    }
    Ok(())
}

/// Exact attention-pair counts for an H x W input: the baseline pays
/// ((H/P_a)(W/P_a))^2, the scorer ((H/(s P_l))(W/(s P_l)))^2, the local
/// stage K ((P_h/P_a)^2)^2, and the aggregator K^2. P_a is the fine
/// patch size shared by the baseline and the local stage.
pub fn token_budget(cfg: &ScoreNetConfig, h: usize, w: usize) -> Result<TokenBudget> {
    let p_a = cfg.local.patch_size;
    let low = cfg.downscale * cfg.scorer.patch_size;
    require_divisible(h, p_a, "image height vs fine patch")?;
    require_divisible(w, p_a, "image width vs fine patch")?;
    require_divisible(h, low, "image height vs downscaled patch")?;
    require_divisible(w, low, "image width vs downscaled patch")?;
    require_divisible(h, cfg.patch_high, "image height vs region size")?;
    require_divisible(w, cfg.patch_high, "image width vs region size")?;
    require_divisible(cfg.patch_high, p_a, "region size vs fine patch")?;

    let fine = ((h / p_a) * (w / p_a)) as u64;
    let scorer_tokens = ((h / low) * (w / low)) as u64;
    let local_tokens = ((cfg.patch_high / p_a) * (cfg.patch_high / p_a)) as u64;
    let k = cfg.k as u64;
    Ok(TokenBudget {
        vanilla: fine * fine,
        scorer: scorer_tokens * scorer_tokens,
        local: k * local_tokens * local_tokens,
        coarse: k * k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn cfg_with(
        downscale: usize,
        p_l: usize,
        p_h: usize,
        p_a: usize,
        k: usize,
    ) -> ScoreNetConfig {
        let mut cfg = ScoreNetConfig::desk_default();
        cfg.downscale = downscale;
        cfg.scorer.patch_size = p_l;
        cfg.patch_high = p_h;
        cfg.local.patch_size = p_a;
        cfg.k = k;
        cfg
    }

    #[test]
    fn worked_example_matches_the_closed_forms() {
        let cfg = cfg_with(8, 4, 32, 4, 8);
        let b = token_budget(&cfg, 256, 256).unwrap();
        assert_eq!(b.vanilla, 4096 * 4096);
        assert_eq!(b.scorer, 64 * 64);
        assert_eq!(b.local, 8 * 64 * 64);
        assert_eq!(b.coarse, 64);
        assert_eq!(b.local, 32768);
    }

    #[test]
    fn degenerate_settings_collapse_to_the_baseline_cost() {
        let cfg = cfg_with(1, 4, 4, 4, 4096);
        let b = token_budget(&cfg, 256, 256).unwrap();
        assert_eq!(b.scorer, b.vanilla);
    }

    #[test]
    fn doubling_the_downscale_divides_scorer_cost_by_sixteen() {
        let coarse = token_budget(&cfg_with(8, 4, 32, 4, 8), 256, 256).unwrap();
        let fine = token_budget(&cfg_with(4, 4, 32, 4, 8), 256, 256).unwrap();
        assert_eq!(fine.scorer, 16 * coarse.scorer);
    }

    #[test]
    fn indivisible_dimensions_are_shape_errors() {
        let cfg = cfg_with(8, 4, 32, 4, 8);
        assert!(matches!(token_budget(&cfg, 250, 256), Err(Error::Shape(_))));
        assert!(matches!(token_budget(&cfg, 256, 100), Err(Error::Shape(_))));
    }

    #[test]
    fn budget_matches_the_instrumented_forward_exactly() {
        let mut cfg = ScoreNetConfig::desk_default();
        cfg.scorer = EncoderConfig {
            embed_dim: 8,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            patch_size: 2,
            num_pseudo_cls: 2,
        };
        cfg.local = EncoderConfig {
            embed_dim: 8,
            depth: 1,
            num_heads: 2,
            mlp_ratio: 2.0,
            patch_size: 2,
            num_pseudo_cls: 1,
        };
        cfg.coarse_depth = 1;
        cfg.downscale = 2;
        cfg.patch_high = 4;
        cfg.k = 3;
        cfg.variant = (2, 1);
        cfg.num_classes = 2;
        cfg.channels = 1;
        cfg.validate().unwrap();

        let mut rng = crate::numerics::RngStream::new(3, 0);
        let params = crate::model::ScoreNetParams::init(&cfg, &mut rng).unwrap();
        let data: Vec<f32> = (0..16 * 16).map(|_| rng.uniform()).collect();
        let image = crate::numerics::Tensor::new(&[1, 16, 16], data).unwrap();

        let budget = token_budget(&cfg, 16, 16).unwrap();
        let trace = crate::infer::infer_forward(&image, &cfg, &params).unwrap();
        assert_eq!(budget.stage_counts(), trace.pair_counts);

        let vcfg = EncoderConfig { patch_size: cfg.local.patch_size, ..cfg.local };
        let vparams = crate::infer::VanillaParams::init(&vcfg, 1, 2, &mut rng).unwrap();
        let (_, pairs) = crate::infer::vanilla_infer(&image, &vcfg, &vparams).unwrap();
        assert_eq!(budget.vanilla, pairs);
    }
}
