//! Alternating adversarial training with metrics and checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::losses::{self, FeatureExtractor};
use crate::numerics::{Graph, Tensor, Var};
use crate::optim::Adam;
use crate::params::{Bound, ParamStore};

pub const GENERATOR_PREFIX: &str = "generator/";
pub const DISCRIMINATOR_PREFIX: &str = "discriminator/";
pub const METRICS_HEADER: &str = "step,loss_d,loss_g,loss_c,loss_total";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub loss_c: f64,
    pub loss_total: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.loss_d, self.loss_g, self.loss_c, self.loss_total
        )
    }
}

/// Append-only CSV of per-step metrics, flushed after every row.
pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        log.line(METRICS_HEADER)?;
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&mut self, m: &StepMetrics) -> Result<()> {
        self.line(&m.csv_row())
    }
}

fn prefixed<'a>(prefix: &str, store: &'a ParamStore) -> impl Iterator<Item = (String, &'a Tensor)> + 'a {
    let prefix = prefix.to_string();
    store.iter().map(move |(n, t)| (format!("{prefix}{n}"), t))
}

/// Writes both networks into one archive.
pub fn save_models(path: &Path, generator: &Generator, discriminator: &Discriminator) -> Result<()> {
    let named: Vec<(String, &Tensor)> = prefixed(GENERATOR_PREFIX, &generator.params)
        .chain(prefixed(DISCRIMINATOR_PREFIX, &discriminator.params))
        .collect();
    checkpoint::save(path, named.iter().map(|(n, t)| (n.as_str(), *t)))
}

/// Replaces both networks' weights from an archive written by [`save_models`].
pub fn load_models(path: &Path, generator: &mut Generator, discriminator: &mut Discriminator) -> Result<()> {
    let entries = checkpoint::load(path)?;
    reject_foreign(&entries)?;
    generator.params.load_from(&entries, GENERATOR_PREFIX)?;
    discriminator.params.load_from(&entries, DISCRIMINATOR_PREFIX)?;
    Ok(())
}

/// Replaces the generator's weights; discriminator entries are ignored.
pub fn load_generator(path: &Path, generator: &mut Generator) -> Result<()> {
    let entries = checkpoint::load(path)?;
    reject_foreign(&entries)?;
    generator.params.load_from(&entries, GENERATOR_PREFIX)?;
    Ok(())
}

fn reject_foreign(entries: &checkpoint::Entries) -> Result<()> {
    if let Some((name, _)) = entries
        .iter()
        .find(|(n, _)| !n.starts_with(GENERATOR_PREFIX) && !n.starts_with(DISCRIMINATOR_PREFIX))
    {
        return Err(crate::error::CheckpointError::UnexpectedTensor(name.clone()).into());
    }
    Ok(())
}

/// Names the first non-finite node of `g`, preferring a parameter name.
fn first_bad_tensor(g: &Graph, named: &[(&str, &ParamStore, &Bound)]) -> String {
    let Some((var, op)) = g.first_non_finite() else {
        return "none recorded".into();
    };
    for (prefix, store, bound) in named {
        if let Some(i) = bound.vars().iter().position(|&v| v == var) {
            return format!(
                "{prefix}{}",
                store.name(store.ids().nth(i).expect("bound matches store"))
            );
        }
    }
    format!("node {} ({op})", var.index())
}

/// Generator forward pass for one step, shared by both half-steps.
pub struct GeneratorPass {
    graph: Graph,
    bound: Bound,
    styles: Vec<usize>,
    contents: Vec<Var>,
    fakes: Vec<Var>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub extractor: FeatureExtractor,
    opt_g: Adam,
    opt_d: Adam,
    content: Dataset,
    style: Dataset,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, content: Dataset, style: Dataset) -> Result<Self> {
        config.validate()?;
        let side = config.image_size;
        for (what, ds) in [("content", &content), ("style", &style)] {
            if ds.extent() != (side, side) {
                return Err(Error::Data(format!(
                    "{what} images are {:?}, expected {side}x{side}",
                    ds.extent()
                )));
            }
        }
        let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::new(config.generator_config(), seeds.random())?;
        let discriminator = Discriminator::new(config.discriminator_config(), seeds.random())?;
        discriminator.check_input(side, side)?;
        let extractor = match &config.extractor_weights {
            Some(path) => FeatureExtractor::from_file(path)?,
            None => FeatureExtractor::seeded(config.extractor_seed),
        };
        let rng = ChaCha8Rng::seed_from_u64(seeds.random());
        Ok(Self {
            opt_g: Adam::new(config.adam_g(), &generator.params),
            opt_d: Adam::new(config.adam_d(), &discriminator.params),
            config,
            generator,
            discriminator,
            extractor,
            content,
            style,
            rng,
            step: 0,
        })
    }

    /// Loads both image folders named in the config.
    pub fn from_config(config: TrainConfig) -> Result<Self> {
        let dir =
            |d: &Option<PathBuf>, key: &str| d.clone().ok_or_else(|| Error::Config(format!("`{key}` is not set")));
        let content_dir = dir(&config.content_dir, "content_dir")?;
        let style_dir = dir(&config.style_dir, "style_dir")?;
        config.validate()?;
        let content = Dataset::from_dir(&content_dir, config.image_size)?;
        let style = Dataset::from_dir(&style_dir, config.image_size)?;
        Self::new(config, content, style)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    fn non_finite(&self, g: &Graph, what: &str, named: &[(&str, &ParamStore, &Bound)]) -> Error {
        Error::NonFinite {
            what: what.into(),
            step: self.step + 1,
            tensor: first_bad_tensor(g, named),
        }
    }

    fn mean_of(g: &Graph, terms: &[Var]) -> Result<Var> {
        let mut sum = terms[0];
        for &t in &terms[1..] {
            sum = g.add(sum, t)?;
        }
        Ok(g.scale(sum, 1.0 / terms.len() as f64))
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let pass = self.generator_pass()?;
        let loss_d = self.update_discriminator(&pass)?;
        self.update_generator(pass, loss_d)
    }

    /// Samples the next batch and runs the generator on it. The returned
    /// pass feeds both halves of the step.
    pub fn generator_pass(&mut self) -> Result<GeneratorPass> {
        let bs = self.config.batch_size;
        let picks: Vec<(usize, usize)> = (0..bs)
            .map(|_| {
                (
                    self.rng.random_range(0..self.content.len()),
                    self.rng.random_range(0..self.style.len()),
                )
            })
            .collect();
        let graph = Graph::new();
        let bound = self.generator.params.bind(&graph, true);
        let mut contents = Vec::with_capacity(bs);
        let mut fakes = Vec::with_capacity(bs);
        for &(ci, _) in &picks {
            let c = graph.constant(self.content.get(ci).clone());
            fakes.push(self.generator.forward(&graph, &bound, c)?);
            contents.push(c);
        }
        if fakes.iter().any(|&f| !graph.value(f).is_finite()) {
            let named = [(GENERATOR_PREFIX, &self.generator.params, &bound)];
            return Err(self.non_finite(&graph, "generator output", &named));
        }
        Ok(GeneratorPass {
            graph,
            bound,
            styles: picks.into_iter().map(|(_, si)| si).collect(),
            contents,
            fakes,
        })
    }

    /// Discriminator half-step on the pass's outputs, held constant.
    /// Returns the discriminator loss before the update.
    pub fn update_discriminator(&mut self, pass: &GeneratorPass) -> Result<f64> {
        let dg = Graph::new();
        let dp = self.discriminator.params.bind(&dg, true);
        let mut d_terms = Vec::with_capacity(pass.fakes.len());
        for (&si, &fake) in pass.styles.iter().zip(&pass.fakes) {
            let real = dg.constant(self.style.get(si).clone());
            let fake = dg.constant(pass.graph.value(fake));
            let real_maps = self.discriminator.forward(&dg, &dp, real)?;
            let fake_maps = self.discriminator.forward(&dg, &dp, fake)?;
            d_terms.push(losses::adv_loss_discriminator(&dg, &real_maps, &fake_maps)?);
        }
        let loss_d_var = Self::mean_of(&dg, &d_terms)?;
        let loss_d = dg.value(loss_d_var).item();
        if !loss_d.is_finite() {
            return Err(self.non_finite(
                &dg,
                "loss_d",
                &[(DISCRIMINATOR_PREFIX, &self.discriminator.params, &dp)],
            ));
        }
        let grads = dg.backward(loss_d_var)?;
        self.opt_d.step(&mut self.discriminator.params, &dp, &grads);
        Ok(loss_d)
    }

    /// Generator half-step against the current discriminator, which is read
    /// but not updated. Completes the step.
    pub fn update_generator(&mut self, pass: GeneratorPass, loss_d: f64) -> Result<StepMetrics> {
        let GeneratorPass {
            graph: gg,
            bound: gp,
            contents,
            fakes,
            ..
        } = pass;
        let dp_frozen = self.discriminator.params.bind(&gg, false);
        let weights = self.config.loss_weights();
        let mut c_terms = Vec::with_capacity(fakes.len());
        let mut g_terms = Vec::with_capacity(fakes.len());
        for (&c, &fake) in contents.iter().zip(&fakes) {
            c_terms.push(losses::content_loss(&gg, &self.extractor, c, fake)?);
            let judged = if weights.lambda_adv == 0.0 {
                gg.detach(fake)
            } else {
                fake
            };
            let maps = self.discriminator.forward(&gg, &dp_frozen, judged)?;
            g_terms.push(losses::adv_loss_generator(&gg, &maps, self.config.adv_mode)?);
        }
        let loss_c_var = Self::mean_of(&gg, &c_terms)?;
        let loss_g_var = Self::mean_of(&gg, &g_terms)?;
        let total_var = losses::total_loss(&gg, loss_c_var, loss_g_var, &weights)?;
        let (loss_c, loss_g) = (gg.value(loss_c_var).item(), gg.value(loss_g_var).item());
        let loss_total = gg.value(total_var).item();
        if !(loss_c.is_finite() && loss_g.is_finite() && loss_total.is_finite()) {
            return Err(self.non_finite(
                &gg,
                "generator loss",
                &[
                    (GENERATOR_PREFIX, &self.generator.params, &gp),
                    (DISCRIMINATOR_PREFIX, &self.discriminator.params, &dp_frozen),
                ],
            ));
        }
        let grads = gg.backward(total_var)?;
        self.opt_g.step(&mut self.generator.params, &gp, &grads);

        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            loss_d,
            loss_g,
            loss_c,
            loss_total,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_models(path, &self.generator, &self.discriminator)
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        load_models(path, &mut self.generator, &mut self.discriminator)
    }

    /// Trains until `max_steps`, writing `metrics.csv`, periodic
    /// `checkpoint-<step>.ckpt` files and `final.ckpt` into `out_dir`.
    pub fn run(&mut self) -> Result<Vec<StepMetrics>> {
        let out = self.config.out_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let mut log = MetricsLog::create(&out.join("metrics.csv"))?;
        let mut history = Vec::with_capacity(self.config.max_steps);
        while self.step < self.config.max_steps {
            let m = self.train_step()?;
            log.append(&m)?;
            history.push(m);
            let every = self.config.checkpoint_every;
            if every > 0 && self.step.is_multiple_of(every) {
                self.save_checkpoint(&out.join(format!("checkpoint-{:06}.ckpt", self.step)))?;
            }
        }
        self.save_checkpoint(&out.join("final.ckpt"))?;
        Ok(history)
    }
}
