use super::tensor::Tensor;
use super::unet::Denoiser;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::image::{extract_patch, variance, PatchRef, ThermalImage};
use crate::rng::SeededRng;

/// Rejections allowed per requested patch before giving up.
pub const MAX_REJECTIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Patches whose variance (in the [-1, 1] domain) is not above this are resampled.
    pub variance_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 192,
            epochs: 10_000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            variance_threshold: 0.6,
        }
    }
}

impl TrainConfig {
    /// Batch size reported for each paper patch size.
    pub fn paper(patch_size: usize) -> Self {
        let batch_size = if patch_size >= 128 { 192 } else { 384 };
        Self {
            batch_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::InvalidArgument("Adam moments must lie in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// Adam moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(net: &Denoiser) -> Self {
        let zeros: Vec<Tensor> = net.params().tensors.iter().map(|t| Tensor::zeros(t.shape)).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn apply(&mut self, net: &mut Denoiser, grads: &[Tensor], cfg: &TrainConfig) {
        self.step += 1;
        let k = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(k);
        let c2 = 1.0 - cfg.beta2.powi(k);
        let params = &mut net.params_mut().tensors;
        for (i, g) in grads.iter().enumerate() {
            let (m, v, p) = (&mut self.m[i].data, &mut self.v[i].data, &mut params[i].data);
            for j in 0..g.data.len() {
                let gj = g.data[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Stacks square patches into a `[n, 1, ps, ps]` tensor.
pub fn stack_patches(patches: &[PatchRef]) -> Result<Tensor> {
    let ps = patches.first().map(|p| p.size).unwrap_or(0);
    if patches.iter().any(|p| p.size != ps) {
        return Err(Error::InvalidArgument("patches in a batch must share one size".into()));
    }
    let mut data = Vec::with_capacity(patches.len() * ps * ps);
    for p in patches {
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor::from_vec([patches.len(), 1, ps, ps], data))
}

/// One optimisation step on clean patches. Returns the loss before the update.
pub fn train_step(
    net: &mut Denoiser,
    adam: &mut AdamState,
    batch: &[PatchRef],
    rng: &mut SeededRng,
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let x0 = stack_patches(batch)?;
    let n = batch.len();
    let item = x0.item_len();
    let ts: Vec<usize> = (0..n).map(|_| rng.below(sched.steps())).collect();
    let eps = Tensor::from_vec(x0.shape, rng.normal_vec(x0.len()));
    let mut x_t = Tensor::zeros(x0.shape);
    for (i, &t) in ts.iter().enumerate() {
        let ab = sched.alpha_bar()[t];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for j in i * item..(i + 1) * item {
            x_t.data[j] = a * x0.data[j] + b * eps.data[j];
        }
    }
    let (loss, grads) = net.loss_and_grad(&x_t, &ts, &eps)?;
    if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite {
            timestep: ts[0],
            context: format!("training loss {loss} at optimizer step {}", adam.step + 1),
        });
    }
    adam.apply(net, &grads, cfg);
    Ok(loss)
}

/// Random `ps x ps` crops from `dataset` whose variance exceeds `threshold`.
pub fn sample_training_patches(
    dataset: &[ThermalImage],
    ps: usize,
    threshold: f64,
    count: usize,
    rng: &mut SeededRng,
) -> Result<Vec<PatchRef>> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if let Some(img) = dataset.iter().find(|im| im.width() < ps || im.height() < ps) {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} is smaller than the {ps}px patch",
            img.width(),
            img.height()
        )));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut rejected = 0;
        loop {
            let img = &dataset[rng.below(dataset.len())];
            let x = rng.below(img.width() - ps + 1) as isize;
            let y = rng.below(img.height() - ps + 1) as isize;
            let patch = extract_patch(img, (x, y), ps)?;
            if variance(&patch.data) > threshold {
                out.push(patch);
                break;
            }
            rejected += 1;
            if rejected >= MAX_REJECTIONS {
                return Err(Error::DatasetTooFlat {
                    threshold,
                    attempts: rejected,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::unet::DenoiserConfig;
    use crate::image::ValueDomain;

    fn desk_net(seed: u64) -> Denoiser {
        Denoiser::new(DenoiserConfig::desk(), &mut SeededRng::new(seed)).unwrap()
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut net = desk_net(11);
        let mut rng = SeededRng::new(12);
        let x = Tensor::from_vec([2, 1, 16, 16], rng.normal_vec(512));
        let target = Tensor::from_vec([2, 1, 16, 16], rng.normal_vec(512));
        let ts = [37, 640];
        let (_, grads) = net.loss_and_grad(&x, &ts, &target).unwrap();
        let h = 1e-4;
        for _ in 0..10 {
            let pi = rng.below(net.params().len());
            let ei = rng.below(net.params().tensors[pi].len());
            let orig = net.params().tensors[pi].data[ei];
            net.params_mut().tensors[pi].data[ei] = orig + h;
            let up = net.loss(&x, &ts, &target).unwrap();
            net.params_mut().tensors[pi].data[ei] = orig - h;
            let down = net.loss(&x, &ts, &target).unwrap();
            net.params_mut().tensors[pi].data[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[pi].data[ei];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(
                rel < 1e-3,
                "{}[{ei}]: analytic {analytic}, numeric {numeric}",
                net.params().names[pi]
            );
        }
    }

    #[test]
    fn zero_predictor_loss_is_mean_square_noise() {
        let mut net = desk_net(0);
        for t in net.params_mut().tensors.iter_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let patches = vec![
            PatchRef {
                origin_x: 0,
                origin_y: 0,
                size: 16,
                data: vec![0.3; 256]
            };
            64
        ];
        let sched = DiffusionSchedule::paper();
        let mut adam = AdamState::new(&net);
        let mut rng = SeededRng::new(3);
        let mut probe = rng.clone();
        let loss = train_step(&mut net, &mut adam, &patches, &mut rng, &sched, &TrainConfig::default()).unwrap();
        for _ in 0..64 {
            probe.below(1000);
        }
        let eps = probe.normal_vec(64 * 256);
        let expected = eps.iter().map(|e| e * e).sum::<f64>() / eps.len() as f64;
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 1.0).abs() < 0.05);
    }

    fn overfit_curve(seed: u64, steps: usize) -> Vec<f64> {
        let mut net = desk_net(seed);
        let mut rng = SeededRng::new(seed + 1);
        let patch = PatchRef {
            origin_x: 0,
            origin_y: 0,
            size: 16,
            data: (0..256).map(|i| if (i / 16 + i % 16) % 2 == 0 { 0.8 } else { -0.8 }).collect(),
        };
        let batch = vec![patch; 8];
        let sched = DiffusionSchedule::paper();
        let cfg = TrainConfig {
            learning_rate: 2e-3,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let mut adam = AdamState::new(&net);
        (0..steps)
            .map(|_| train_step(&mut net, &mut adam, &batch, &mut rng, &sched, &cfg).unwrap())
            .collect()
    }

    #[test]
    fn training_is_deterministic() {
        assert_eq!(overfit_curve(5, 5), overfit_curve(5, 5));
    }

    #[test]
    fn overfits_single_patch() {
        let curve = overfit_curve(9, 500);
        let baseline = curve[0];
        let tail = curve[450..].iter().sum::<f64>() / 50.0;
        assert!(tail < 0.9 * baseline, "baseline {baseline}, tail {tail}");
    }

    #[test]
    fn strict_variance_threshold() {
        let flat = vec![ThermalImage::filled(16, 16, ValueDomain::Normalized, 0.2)];
        let mut rng = SeededRng::new(1);
        assert!(matches!(
            sample_training_patches(&flat, 8, 0.0, 1, &mut rng),
            Err(Error::DatasetTooFlat { .. })
        ));
        assert_eq!(sample_training_patches(&flat, 8, -1e-9, 3, &mut rng).unwrap().len(), 3);

        let checker = vec![ThermalImage::from_fn(16, 16, |x, y| if (x + y) % 2 == 0 { 1.0 } else { -1.0 })];
        let p = sample_training_patches(&checker, 8, 0.6, 5, &mut rng).unwrap();
        assert!(p.iter().all(|p| (variance(&p.data) - 1.0).abs() < 1e-12));
    }

    #[test]
    fn all_accepted_patches_exceed_threshold() {
        let mut rng = SeededRng::new(2);
        let mut dataset = vec![ThermalImage::filled(32, 32, ValueDomain::Normalized, -0.5)];
        dataset.push(ThermalImage::from_fn(32, 32, |x, _| if x < 16 { -0.9 } else { 0.9 }));
        dataset.push(rng.normal_image(32, 32).map(|v| (v * 0.5).clamp(-1.0, 1.0)));
        let patches = sample_training_patches(&dataset, 16, 0.1, 10_000, &mut rng).unwrap();
        assert_eq!(patches.len(), 10_000);
        assert!(patches.iter().all(|p| variance(&p.data) > 0.1));
    }
}
