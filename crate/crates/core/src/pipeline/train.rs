use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{enhance, prealign_prior};
use crate::autograd::{Adam, BoundParams, GradAccumulator, Tape, Tensor, Var};
use crate::config::{AblationMode, PriorAlignment, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{
    coarse_loss, fine_loss, gan_losses, patch_bce, sr_loss, CoarseWeights, FineLoss, FineWeights,
};
use crate::networks::{
    sr_input_stack, CoarseDirNet, FineDirNet, SrDiscriminator, SrGenerator, STACK_RADIUS,
};
use crate::phantom::{build_dataset, Phantom};
use crate::volume::{RegistrationPair, Volume};
use crate::warp::dvf_scale;

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub columns: Vec<String>,
    pub rows: Vec<(usize, f32, Vec<f64>)>,
}

impl TrainLog {
    fn new(terms: &[&str]) -> Self {
        Self {
            columns: terms.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Value of `column` in the last epoch.
    pub fn last(&self, column: &str) -> Option<f64> {
        let i = self.columns.iter().position(|c| c == column)?;
        self.rows.last().map(|r| r.2[i])
    }

    pub fn column(&self, column: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == column)?;
        Some(self.rows.iter().map(|r| r.2[i]).collect())
    }

    /// CSV with columns `epoch, lr` and then every loss term.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["epoch".to_string(), "lr".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (epoch, lr, vals) in &self.rows {
            let mut rec = vec![epoch.to_string(), lr.to_string()];
            rec.extend(vals.iter().map(f64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

/// Aborts on a non-finite loss, or when the epoch loss stays above twice
/// the step-0 loss (measured as `baseline + |baseline|`) for `patience` epochs.
struct DivergenceGuard {
    baseline: Option<f64>,
    over: usize,
    patience: usize,
    what: &'static str,
}

impl DivergenceGuard {
    fn new(patience: usize, what: &'static str) -> Self {
        Self {
            baseline: None,
            over: 0,
            patience,
            what,
        }
    }

    fn first_step(&mut self, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "{} is not finite at the first step",
                self.what
            )));
        }
        self.baseline.get_or_insert(loss);
        Ok(())
    }

    fn epoch(&mut self, epoch: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "{} became non-finite in epoch {epoch}",
                self.what
            )));
        }
        let b = self.baseline.unwrap_or(loss);
        if loss > b + b.abs() {
            self.over += 1;
        } else {
            self.over = 0;
        }
        if self.over >= self.patience {
            return Err(Error::Diverged(format!(
                "{} stayed above twice its initial value {b} for {} epochs (now {loss} at epoch {epoch})",
                self.what, self.patience
            )));
        }
        Ok(())
    }
}

/// Running means of a fixed number of terms.
struct Means {
    sums: Vec<f64>,
    n: usize,
}

impl Means {
    fn new(k: usize) -> Self {
        Self {
            sums: vec![0.0; k],
            n: 0,
        }
    }

    fn add(&mut self, vals: &[f64]) {
        self.sums.iter_mut().zip(vals).for_each(|(s, v)| *s += v);
        self.n += 1;
    }

    fn get(&self) -> Vec<f64> {
        self.sums.iter().map(|s| s / self.n.max(1) as f64).collect()
    }
}

/// Ordered phase pairs of every phantom, rotation-augmented when the
/// config asks for it and the slices are square.
pub fn coarse_pairs(phantoms: &[Phantom], cfg: &TrainConfig) -> Result<Vec<RegistrationPair>> {
    let mut out = Vec::new();
    for p in phantoms {
        let g = p.lr.grid();
        out.extend(build_dataset(
            &p.lr,
            cfg.augment_rotations && g.nx() == g.ny(),
        )?);
    }
    Ok(out)
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Unsupervised bidirectional training of the coarse network.
pub fn pretrain_coarse(
    cfg: &TrainConfig,
    pairs: &[RegistrationPair],
) -> Result<(CoarseDirNet, TrainLog)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "coarse training needs at least one pair".into(),
        ));
    }
    let mut net = CoarseDirNet::new(cfg.coarse_arch, cfg.seed)?;
    let mut adam = Adam::new(cfg.lr_pretrain.at(0));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights = CoarseWeights {
        smooth: cfg.coarse_smooth_weight,
        inverse_consistency: cfg.inverse_consistency_weight,
        window: cfg.ncc_window,
    };
    let mut log = TrainLog::new(&["loss", "ncc_m2f", "ncc_f2m", "smooth"]);
    let mut guard = DivergenceGuard::new(cfg.divergence_patience, "coarse loss");
    let group = cfg.batch_dir * cfg.accumulate_dir;
    for epoch in 0..cfg.epochs_coarse {
        adam.lr = cfg.lr_pretrain.at(epoch);
        let mut means = Means::new(4);
        for chunk in shuffled(pairs.len(), &mut rng).chunks(group) {
            let mut acc = GradAccumulator::new();
            let mut step = Means::new(1);
            for &i in chunk {
                let pair = &pairs[i];
                let tape = Tape::new();
                let p = net.params.bind(&tape, true);
                let m = tape.constant(pair.moving.to_tensor());
                let f = tape.constant(pair.fixed.to_tensor());
                let (m2f, f2m) = CoarseDirNet::split(net.forward(&p, m, f)?)?;
                let l = coarse_loss(m, f, m2f, f2m, weights)?;
                let vals = [
                    l.total.item(),
                    l.ncc_m2f.item(),
                    l.ncc_f2m.item(),
                    l.smooth.item(),
                ]
                .map(f64::from);
                means.add(&vals);
                step.add(&vals[..1]);
                let mut g = tape.backward(l.total)?;
                acc.add(p.grads(&mut g));
            }
            guard.first_step(step.get()[0])?;
            adam.step(&mut net.params, &acc.take_mean())?;
        }
        let m = means.get();
        log.rows.push((epoch, adam.lr, m.clone()));
        guard.epoch(epoch, m[0])?;
    }
    Ok((net, log))
}

/// Paired slices for super-resolution training: 5-slice low-resolution
/// stacks and the matching high-resolution centre slices.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSet {
    h: usize,
    w: usize,
    stacks: Vec<f32>,
    targets: Vec<f32>,
}

impl SliceSet {
    /// Every transversal slice of every phase of every phantom.
    pub fn from_phantoms(phantoms: &[Phantom]) -> Result<Self> {
        let first = phantoms
            .first()
            .ok_or_else(|| Error::InvalidArgument("no phantoms given".into()))?;
        let g = *first.lr.grid();
        let mut set = Self {
            h: g.ny(),
            w: g.nx(),
            stacks: Vec::new(),
            targets: Vec::new(),
        };
        for p in phantoms {
            p.lr.grid().ensure_same(&g, "slice set")?;
            for k in 0..p.lr.len() {
                set.push(p.lr.phase(k), p.hr.phase(k))?;
            }
        }
        Ok(set)
    }

    fn push(&mut self, lr: &Volume, hr: &Volume) -> Result<()> {
        hr.grid()
            .ensure_same(&lr.grid().refined_in_plane(2), "slice pair")?;
        self.stacks.extend_from_slice(sr_input_stack(lr)?.data());
        self.targets.extend_from_slice(hr.data());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.targets.len() / (4 * self.h * self.w)
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// `([B, 5, h, w], [B, 1, 2h, 2w])` for the given slice indices.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let (ps, pt) = (
            (2 * STACK_RADIUS + 1) * self.h * self.w,
            4 * self.h * self.w,
        );
        let mut s = Vec::with_capacity(idx.len() * ps);
        let mut t = Vec::with_capacity(idx.len() * pt);
        for &i in idx {
            s.extend_from_slice(&self.stacks[i * ps..(i + 1) * ps]);
            t.extend_from_slice(&self.targets[i * pt..(i + 1) * pt]);
        }
        let b = idx.len();
        (
            Tensor::from_vec(vec![b, 2 * STACK_RADIUS + 1, self.h, self.w], s),
            Tensor::from_vec(vec![b, 1, 2 * self.h, 2 * self.w], t),
        )
    }
}

/// Alternating conditional-GAN training: one discriminator step, then one
/// generator step per batch.
pub fn pretrain_sr(
    cfg: &TrainConfig,
    data: &SliceSet,
) -> Result<(SrGenerator, SrDiscriminator, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "SR training needs at least one slice".into(),
        ));
    }
    let mut gen = SrGenerator::new(cfg.sr_arch.generator_width, cfg.seed.wrapping_add(1))?;
    let mut disc = SrDiscriminator::new(cfg.sr_arch.discriminator_width, cfg.seed.wrapping_add(2))?;
    let (mut adam_g, mut adam_d) = (
        Adam::new(cfg.lr_pretrain.at(0)),
        Adam::new(cfg.lr_pretrain.at(0)),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut log = TrainLog::new(&["g_loss", "d_loss", "g_adv", "l1", "ms_ssim", "d_accuracy"]);
    let mut guard = DivergenceGuard::new(cfg.divergence_patience, "generator L1 term");
    for epoch in 0..cfg.epochs_sr {
        let lr = cfg.lr_pretrain.at(epoch);
        adam_g.lr = lr;
        adam_d.lr = lr;
        let mut means = Means::new(6);
        for idx in shuffled(data.len(), &mut rng).chunks(cfg.batch_sr) {
            let (stack, target) = data.batch(idx);
            let (d_loss, d_acc) = {
                let tape = Tape::new();
                let gp = gen.params.bind(&tape, false);
                let dp = disc.params.bind(&tape, true);
                let s = tape.constant(stack.clone());
                let fake = gen.forward(&gp, s)?;
                let real_logits = disc.forward(&dp, s, tape.constant(target.clone()))?;
                let fake_logits = disc.forward(&dp, s, fake)?;
                let acc = discriminator_accuracy(real_logits, fake_logits)?;
                let (d_loss, _) = gan_losses(real_logits, fake_logits)?;
                let loss = d_loss.item();
                let mut g = tape.backward(d_loss)?;
                adam_d.step(&mut disc.params, &dp.grads(&mut g))?;
                (loss, acc)
            };
            let tape = Tape::new();
            let gp = gen.params.bind(&tape, true);
            let dp = disc.params.bind(&tape, false);
            let s = tape.constant(stack);
            let fake = gen.forward(&gp, s)?;
            let g_adv = patch_bce(disc.forward(&dp, s, fake)?, 1.0)?;
            let l = sr_loss(
                fake,
                tape.constant(target),
                g_adv,
                cfg.sr_l1_weight,
                cfg.sr_ms_ssim_weight,
            )?;
            let vals = [
                l.total.item() as f64,
                d_loss as f64,
                g_adv.item() as f64,
                l.l1.item() as f64,
                l.ms_ssim.item() as f64,
                d_acc,
            ];
            guard.first_step(vals[3])?;
            means.add(&vals);
            let mut g = tape.backward(l.total)?;
            adam_g.step(&mut gen.params, &gp.grads(&mut g))?;
        }
        let m = means.get();
        log.rows.push((epoch, lr, m.clone()));
        guard.epoch(epoch, m[3])?;
    }
    Ok((gen, disc, log))
}

/// Share of samples the discriminator labels correctly by mean patch logit.
fn discriminator_accuracy(real: Var<'_>, fake: Var<'_>) -> Result<f64> {
    let (r, f) = (real.mean_rows()?.value(), fake.mean_rows()?.value());
    let hits = r.data().iter().filter(|&&x| x > 0.0).count()
        + f.data().iter().filter(|&&x| x < 0.0).count();
    Ok(hits as f64 / (r.len() + f.len()) as f64)
}

/// The three models after (or during) joint tuning of one mode.
#[derive(Clone, Debug, PartialEq)]
pub struct JointModels {
    pub coarse: CoarseDirNet,
    /// Present for the modes that super-resolve.
    pub generator: Option<SrGenerator>,
    pub fine: FineDirNet,
    /// Present only when the discriminator was tuned alongside.
    pub discriminator: Option<SrDiscriminator>,
}

struct Bound<'t> {
    coarse: BoundParams<'t>,
    gen: Option<BoundParams<'t>>,
    fine: BoundParams<'t>,
}

impl JointModels {
    fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        Bound {
            coarse: self.coarse.params.bind(tape, trainable),
            gen: self
                .generator
                .as_ref()
                .map(|g| g.params.bind(tape, trainable)),
            fine: self.fine.params.bind(tape, trainable),
        }
    }
}

struct JointSample<'a> {
    moving: &'a Volume,
    moving_hr: &'a Volume,
    fixed: &'a Volume,
    prior: Option<usize>,
}

/// Transversal slices of a volume as a `[nz, 1, ny, nx]` batch.
fn slice_batch(v: &Volume) -> Tensor {
    let g = v.grid();
    Tensor::from_vec(vec![g.nz(), 1, g.ny(), g.nx()], v.data().to_vec())
}

/// One discriminator update on the slices of `lr` against those of `hr`.
fn discriminator_step(
    gen: &SrGenerator,
    disc: &mut SrDiscriminator,
    adam: &mut Adam,
    lr: &Volume,
    hr: &Volume,
) -> Result<f64> {
    let tape = Tape::new();
    let gp = gen.params.bind(&tape, false);
    let dp = disc.params.bind(&tape, true);
    let s = tape.constant(sr_input_stack(lr)?);
    let fake = gen.forward(&gp, s)?;
    let (d_loss, _) = gan_losses(
        disc.forward(&dp, s, tape.constant(slice_batch(hr)))?,
        disc.forward(&dp, s, fake)?,
    )?;
    let loss = d_loss.item() as f64;
    let mut g = tape.backward(d_loss)?;
    adam.step(&mut disc.params, &dp.grads(&mut g))?;
    Ok(loss)
}

fn fine_weights(cfg: &TrainConfig, mode: AblationMode) -> FineWeights {
    FineWeights {
        alpha: if mode == AblationMode::CoarseFine {
            1.0
        } else {
            cfg.alpha
        },
        smooth: cfg.fine_smooth_weight,
        window: cfg.ncc_window,
        use_prior: mode.uses_prior(),
    }
}

/// The whole cascade recorded on one tape, ending in the fine loss.
fn joint_objective<'t>(
    tape: &'t Tape,
    nets: &JointModels,
    b: &Bound<'t>,
    moving: &Volume,
    fixed: &Volume,
    prior: Option<&Volume>,
    weights: FineWeights,
) -> Result<FineLoss<'t>> {
    let grid_lr = *moving.grid();
    let grid_hr = grid_lr.refined_in_plane(2);
    let hr_dims = [grid_hr.nz(), grid_hr.ny(), grid_hr.nx()];
    let m = tape.constant(moving.to_tensor());
    let f = tape.constant(fixed.to_tensor());
    let (m2f, _) = CoarseDirNet::split(nets.coarse.forward(&b.coarse, m, f)?)?;
    let phi_tilde = m2f
        .resample_linear(&hr_dims)?
        .scale_channels(&dvf_scale(&grid_lr, &grid_hr))?;
    let up = |x: Var<'t>| -> Result<Var<'t>> {
        match (&nets.generator, &b.gen) {
            (Some(g), Some(gb)) => g
                .forward(gb, x.slice_stack(STACK_RADIUS)?)?
                .clamp(0.0, 1.0)
                .reshape(&grid_hr.tensor_shape(1)),
            _ => x.resample_linear(&hr_dims),
        }
    };
    let (m_t, f_t) = (up(m)?, up(f)?);
    let p = tape.constant(prior.map_or_else(
        || Tensor::zeros(&grid_hr.tensor_shape(1)),
        Volume::to_tensor,
    ));
    let v = nets.fine.forward(&b.fine, f_t, m_t.warp(phi_tilde)?, p)?;
    fine_loss(f_t, m_t, p, v.add(phi_tilde)?, weights)
}

/// Joint loss of one pair before any tuning step, with the prior already aligned.
pub fn joint_loss_at_start(
    cfg: &TrainConfig,
    mode: AblationMode,
    nets: &JointModels,
    moving: &Volume,
    fixed: &Volume,
    prior_aligned: Option<&Volume>,
) -> Result<f32> {
    let tape = Tape::new();
    let b = nets.bind(&tape, false);
    Ok(joint_objective(
        &tape,
        nets,
        &b,
        moving,
        fixed,
        prior_aligned,
        fine_weights(cfg, mode),
    )?
    .total
    .item())
}

/// End-to-end tuning of coarse network, generator (for the SR modes) and a
/// fresh fine network on the fine loss. With `freeze_discriminator` off the
/// SR modes also tune `discriminator` and add the generator's adversarial term.
pub fn joint_finetune(
    cfg: &TrainConfig,
    mode: AblationMode,
    coarse: &CoarseDirNet,
    generator: Option<&SrGenerator>,
    discriminator: Option<&SrDiscriminator>,
    phantoms: &[Phantom],
) -> Result<(JointModels, TrainLog)> {
    cfg.validate()?;
    if !mode.uses_fine() {
        return Err(Error::InvalidArgument(format!(
            "mode {mode} has no joint stage"
        )));
    }
    let gen_opt = if mode.uses_sr() {
        Some(generator.ok_or_else(|| {
            Error::MissingModel(format!("mode {mode} needs a pretrained generator"))
        })?)
    } else {
        None
    };
    let adversarial = mode.uses_sr() && !cfg.freeze_discriminator;
    let disc_opt = if adversarial {
        Some(discriminator.ok_or_else(|| {
            Error::MissingModel(format!(
                "mode {mode} with an unfrozen discriminator needs a pretrained discriminator"
            ))
        })?)
    } else {
        None
    };
    let mut priors = Vec::new();
    let mut samples = Vec::new();
    for p in phantoms {
        let k = p.lr.len();
        let base = priors.len();
        if mode.uses_prior() {
            for i in 0..k {
                let aligned = match cfg.prior_alignment {
                    PriorAlignment::Coarse => {
                        prealign_prior(
                            coarse,
                            &p.prior,
                            &enhance(gen_opt, p.lr.phase(i))?,
                            p.lr.grid(),
                        )?
                        .0
                    }
                    PriorAlignment::Identity => p.prior.clone(),
                };
                priors.push(aligned);
            }
        }
        for i in 0..k {
            for j in (0..k).filter(|&j| j != i) {
                samples.push(JointSample {
                    moving: p.lr.phase(i),
                    moving_hr: p.hr.phase(i),
                    fixed: p.lr.phase(j),
                    prior: mode.uses_prior().then_some(base + i),
                });
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "joint tuning needs at least one pair".into(),
        ));
    }
    let mut nets = JointModels {
        coarse: coarse.clone(),
        generator: gen_opt.cloned(),
        fine: FineDirNet::new(cfg.fine_arch, cfg.seed.wrapping_add(3))?,
        discriminator: disc_opt.cloned(),
    };
    let weights = fine_weights(cfg, mode);
    let lr0 = cfg.lr_joint.at(0);
    let (mut adam_c, mut adam_g, mut adam_f) = (Adam::new(lr0), Adam::new(lr0), Adam::new(lr0));
    let mut adam_d = Adam::new(lr0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut columns = vec!["loss", "ncc_moving", "ncc_prior", "smooth"];
    if adversarial {
        columns.extend(["g_adv", "d_loss"]);
    }
    let mut log = TrainLog::new(&columns);
    let mut guard = DivergenceGuard::new(cfg.divergence_patience, "joint loss");
    for epoch in 0..cfg.epochs_joint {
        let lr = cfg.lr_joint.at(epoch);
        for a in [&mut adam_c, &mut adam_g, &mut adam_f, &mut adam_d] {
            a.lr = lr;
        }
        let mut means = Means::new(columns.len());
        for chunk in shuffled(samples.len(), &mut rng).chunks(cfg.batch_dir * cfg.accumulate_dir) {
            let (mut acc_c, mut acc_g, mut acc_f) = (
                GradAccumulator::new(),
                GradAccumulator::new(),
                GradAccumulator::new(),
            );
            let mut step = Means::new(1);
            let mut d_losses = Vec::new();
            if let (Some(gen), Some(disc)) = (&nets.generator, nets.discriminator.as_mut()) {
                for &i in chunk {
                    d_losses.push(discriminator_step(
                        gen,
                        disc,
                        &mut adam_d,
                        samples[i].moving,
                        samples[i].moving_hr,
                    )?);
                }
            }
            for (n, &i) in chunk.iter().enumerate() {
                let s = &samples[i];
                let tape = Tape::new();
                let b = nets.bind(&tape, true);
                let prior = s.prior.map(|k| &priors[k]);
                let l = joint_objective(&tape, &nets, &b, s.moving, s.fixed, prior, weights)?;
                let mut vals = vec![
                    l.total.item() as f64,
                    l.ncc_moving.item() as f64,
                    l.ncc_prior.map_or(0.0, |v| v.item() as f64),
                    l.smooth.item() as f64,
                ];
                let mut total = l.total;
                if let (Some(gen), Some(gb), Some(disc)) =
                    (&nets.generator, &b.gen, &nets.discriminator)
                {
                    let dp = disc.params.bind(&tape, false);
                    let stack = tape.constant(sr_input_stack(s.moving)?);
                    let g_adv = patch_bce(disc.forward(&dp, stack, gen.forward(gb, stack)?)?, 1.0)?;
                    total = total.add(g_adv)?;
                    vals[0] = total.item() as f64;
                    vals.extend([g_adv.item() as f64, d_losses[n]]);
                }
                means.add(&vals);
                step.add(&vals[..1]);
                let mut g = tape.backward(total)?;
                acc_c.add(b.coarse.grads(&mut g));
                if let Some(gb) = &b.gen {
                    acc_g.add(gb.grads(&mut g));
                }
                acc_f.add(b.fine.grads(&mut g));
            }
            guard.first_step(step.get()[0])?;
            adam_c.step(&mut nets.coarse.params, &acc_c.take_mean())?;
            if let Some(gen) = nets.generator.as_mut() {
                adam_g.step(&mut gen.params, &acc_g.take_mean())?;
            }
            adam_f.step(&mut nets.fine.params, &acc_f.take_mean())?;
        }
        let m = means.get();
        log.rows.push((epoch, lr, m.clone()));
        guard.epoch(epoch, m[0])?;
    }
    Ok((nets, log))
}
