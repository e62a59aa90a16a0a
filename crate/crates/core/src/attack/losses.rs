//! Attack and regularizer losses with their gradients.

use crate::error::{Error, Result};
use crate::image::{DisparityMap, Image, Mask};
use crate::patch::TextureElement;

use super::AttackConfig;

fn region_count(a: &DisparityMap, b: &DisparityMap, mask: &Mask) -> Result<usize> {
    if a.dims() != b.dims() || a.dims() != mask.dims() {
        return Err(Error::Domain("rMSE inputs differ in shape".into()));
    }
    match mask.count() {
        0 => Err(Error::Domain("rMSE region is empty".into())),
        n => Ok(n),
    }
}

/// Mean squared difference between adversarial and clean predictions inside the region.
pub fn rmse_loss(pred_adv: &DisparityMap, pred_clean: &DisparityMap, region: &Mask) -> Result<f64> {
    let n = region_count(pred_adv, pred_clean, region)?;
    let s: f64 = region.iter_set().map(|(r, c)| (pred_adv.get(r, c) - pred_clean.get(r, c)).powi(2)).sum();
    Ok(s / n as f64)
}

/// `∂ rmse / ∂ pred_adv`
pub fn rmse_grad(pred_adv: &DisparityMap, pred_clean: &DisparityMap, region: &Mask) -> Result<DisparityMap> {
    let n = region_count(pred_adv, pred_clean, region)? as f64;
    let mut g = DisparityMap::new(pred_adv.height(), pred_adv.width());
    for (r, c) in region.iter_set() {
        g.set(r, c, 2.0 * (pred_adv.get(r, c) - pred_clean.get(r, c)) / n);
    }
    Ok(g)
}

/// Mean of `pred²` over the region: pulls disparity toward zero directly.
pub fn zero_target_loss(pred: &DisparityMap, region: &Mask) -> Result<(f64, DisparityMap)> {
    let n = region_count(pred, pred, region)? as f64;
    let mut g = DisparityMap::new(pred.height(), pred.width());
    let mut loss = 0.0;
    for (r, c) in region.iter_set() {
        let d = pred.get(r, c);
        loss += d * d / n;
        g.set(r, c, 2.0 * d / n);
    }
    Ok((loss, g))
}

/// Binary entropy per entry, averaged over entries and channels.
pub fn entropy_loss(element: &TextureElement, epsilon: f64) -> f64 {
    let data = element.image().data();
    let s: f64 = data.iter().map(|&e| -e * (e + epsilon).ln() - (1.0 - e) * (1.0 - e + epsilon).ln()).sum();
    s / data.len() as f64
}

pub fn entropy_grad(element: &TextureElement, epsilon: f64) -> Image {
    let img = element.image();
    let n = img.data().len() as f64;
    let mut g = img.clone();
    for v in g.data_mut() {
        let e = *v;
        let d = -(e + epsilon).ln() - e / (e + epsilon) + (1.0 - e + epsilon).ln() + (1.0 - e) / (1.0 - e + epsilon);
        *v = d / n;
    }
    g
}

fn check_tv(element: &TextureElement) -> Result<()> {
    let (h, w) = element.size();
    if h < 2 || w < 2 {
        return Err(Error::Domain(format!("TV needs an element of at least 2x2, got {h}x{w}")));
    }
    Ok(())
}

/// Anisotropic total variation, channel-summed and normalised by `h_t·w_t`.
pub fn tv_loss(element: &TextureElement) -> Result<f64> {
    check_tv(element)?;
    let img = element.image();
    let (h, w, ch) = img.dims();
    let mut s = 0.0;
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let v = img.get(r, c, k);
                if r + 1 < h {
                    s += (img.get(r + 1, c, k) - v).abs();
                }
                if c + 1 < w {
                    s += (img.get(r, c + 1, k) - v).abs();
                }
            }
        }
    }
    Ok(s / (h * w) as f64)
}

/// Subgradient of [`tv_loss`] (zero where neighbours tie).
pub fn tv_grad(element: &TextureElement) -> Result<Image> {
    check_tv(element)?;
    let img = element.image();
    let (h, w, ch) = img.dims();
    let n = (h * w) as f64;
    let mut g = Image::new(h, w, ch);
    let sign = |x: f64| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let v = img.get(r, c, k);
                for (rr, cc) in [(r + 1, c), (r, c + 1)] {
                    if rr < h && cc < w {
                        let s = sign(img.get(rr, cc, k) - v) / n;
                        g.add_at(rr, cc, k, s);
                        g.add_at(r, c, k, -s);
                    }
                }
            }
        }
    }
    Ok(g)
}

/// `rmse + α·entropy + β·tv` with the mode's effective weights (grid mode drops both regularizers).
pub fn total_loss(rmse: f64, entropy: f64, tv: f64, config: &AttackConfig) -> f64 {
    let (a, b) = config.effective_weights();
    rmse + a * entropy + b * tv
}

/// The minimized objective: the attack term enters with a negative sign, the regularizers positive.
pub fn objective(attack_term: f64, entropy: f64, tv: f64, config: &AttackConfig) -> f64 {
    let (a, b) = config.effective_weights();
    attack_term + a * entropy + b * tv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_element(h: usize, w: usize, seed: u64) -> TextureElement {
        TextureElement::random(h, w, 0.0, 1.0, seed).unwrap()
    }

    #[test]
    fn rmse_examples() {
        let clean = DisparityMap::from_fn(8, 8, |r, c| (r * 8 + c) as f64);
        let region = Mask::from_fn(8, 8, |r, c| r >= 2 && c < 5);
        assert_eq!(rmse_loss(&clean, &clean, &region).unwrap(), 0.0);
        let shifted = DisparityMap::from_fn(8, 8, |r, c| clean.get(r, c) + 2.0);
        assert_eq!(rmse_loss(&shifted, &clean, &region).unwrap(), 4.0);
        assert!(rmse_loss(&clean, &clean, &Mask::new(8, 8)).is_err());
    }

    #[test]
    fn rmse_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = DisparityMap::from_fn(8, 8, |_, _| rng.gen_range(0.0..50.0));
        let b = DisparityMap::from_fn(8, 8, |_, _| rng.gen_range(0.0..50.0));
        let mut region = Mask::new(8, 8);
        let mut picked = 0;
        while picked < 20 {
            let (r, c) = (rng.gen_range(0..8), rng.gen_range(0..8));
            if !region.get(r, c) {
                region.set(r, c, true);
                picked += 1;
            }
        }
        let mut direct = 0.0;
        for r in 0..8 {
            for c in 0..8 {
                if region.get(r, c) {
                    direct += (a.get(r, c) - b.get(r, c)).powi(2);
                }
            }
        }
        assert!((rmse_loss(&a, &b, &region).unwrap() - direct / 20.0).abs() < 1e-9);
    }

    #[test]
    fn entropy_examples() {
        let binary = TextureElement::new(Image::from_fn(4, 4, 3, |r, c, _| ((r + c) % 2) as f64)).unwrap();
        assert!(entropy_loss(&binary, 1e-8) < 1e-7);
        let half = TextureElement::new(Image::filled(4, 4, 3, 0.5)).unwrap();
        assert!((entropy_loss(&half, 1e-8) - 2f64.ln()).abs() < 1e-7);
        let e = random_element(5, 6, 3);
        let direct: f64 = e.image().data().iter().map(|&v| -v * (v + 1e-8).ln() - (1.0 - v) * (1.0 - v + 1e-8).ln()).sum::<f64>() / 90.0;
        assert!((entropy_loss(&e, 1e-8) - direct).abs() < 1e-12);
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_loss(&TextureElement::new(Image::filled(4, 4, 3, 0.3)).unwrap()).unwrap(), 0.0);
        // one varying channel: the other two are constant and add nothing
        let halves = TextureElement::new(Image::from_fn(4, 4, 3, |_, c, k| if k > 0 || c < 2 { 0.0 } else { 1.0 })).unwrap();
        assert_eq!(tv_loss(&halves).unwrap(), 0.25);
        let e = random_element(5, 6, 4);
        let img = e.image();
        let mut direct = 0.0;
        for r in 0..5 {
            for c in 0..6 {
                for k in 0..3 {
                    if r < 4 {
                        direct += (img.get(r + 1, c, k) - img.get(r, c, k)).abs();
                    }
                    if c < 5 {
                        direct += (img.get(r, c + 1, k) - img.get(r, c, k)).abs();
                    }
                }
            }
        }
        assert!((tv_loss(&e).unwrap() - direct / 30.0).abs() < 1e-12);
    }

    #[test]
    fn regularizer_gradients_match_fd() {
        let e = random_element(6, 5, 9);
        let ge = entropy_grad(&e, 1e-8);
        let gt = tv_grad(&e).unwrap();
        for idx in [0usize, 7, 33, 61, 89] {
            let perturb = |h: f64| {
                let mut img = e.image().clone();
                img.data_mut()[idx] += h;
                TextureElement::new(img).unwrap()
            };
            let (p, m) = (perturb(1e-6), perturb(-1e-6));
            let fd_e = (entropy_loss(&p, 1e-8) - entropy_loss(&m, 1e-8)) / 2e-6;
            let fd_t = (tv_loss(&p).unwrap() - tv_loss(&m).unwrap()) / 2e-6;
            assert!((fd_e - ge.data()[idx]).abs() < 1e-6);
            assert!((fd_t - gt.data()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn total_loss_weights() {
        let dv = AttackConfig::default();
        assert_eq!(dv.alpha, 0.1);
        assert_eq!(dv.beta, 10.0);
        let reg = total_loss(1.0, 0.5, 0.1, &dv) - 1.0;
        assert!((reg - (0.05 + 1.0)).abs() < 1e-12);
        let plain = AttackConfig { alpha: 0.0, beta: 0.0, ..dv.clone() };
        assert_eq!(total_loss(1.0, 0.5, 0.1, &plain), 1.0);
        let grid = AttackConfig { mode: AttackMode::Grid, ..dv };
        assert_eq!(total_loss(1.0, 0.5, 0.1, &grid), 1.0);
    }
}
