//! The trainable bundle for one ablation variant.

use rand::Rng;

use crate::config::{RunConfig, ScheduleConfig, Variant};
use crate::data::Image;
use crate::dcg::{softmax_f64, Dcg, PriorPair};
use crate::denoiser::{Denoiser, ImageEncoder};
use crate::error::{Error, Result};
use crate::nn::{join, Linear, Module, Slot};
use crate::schedule::NoiseSchedule;

/// Networks and schedule for one variant; disabled parts are `None`.
///
/// * `basic`: `encoder` + `head`.
/// * `C1`: `encoder` + `denoiser`, uniform priors.
/// * `C2`, `full`: `encoder` + `denoiser` + `dcg`.
#[derive(Debug, Clone)]
pub struct Model {
    pub variant: Variant,
    pub classes: usize,
    pub channels: usize,
    pub image_size: usize,
    pub schedule_config: ScheduleConfig,
    pub schedule: NoiseSchedule,
    pub encoder: ImageEncoder,
    pub head: Option<Linear>,
    pub denoiser: Option<Denoiser>,
    pub dcg: Option<Dcg>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.data;
        let encoder = ImageEncoder::new(&cfg.denoiser, d.channels, d.image_size, rng)?;
        let variant = cfg.variant;
        let head = (!variant.uses_diffusion())
            .then(|| Linear::new(cfg.denoiser.latent_dim, d.classes, rng));
        let denoiser = variant
            .uses_diffusion()
            .then(|| Denoiser::new(d.classes, cfg.denoiser.latent_dim, rng))
            .transpose()?;
        let dcg = variant
            .uses_dcg()
            .then(|| Dcg::new(&cfg.dcg, d.classes, d.channels, d.image_size, rng))
            .transpose()?;
        Ok(Self {
            variant,
            classes: d.classes,
            channels: d.channels,
            image_size: d.image_size,
            schedule_config: cfg.schedule.clone(),
            schedule: cfg.schedule.build()?,
            encoder,
            head,
            denoiser,
            dcg,
        })
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        if image.channels != self.channels || image.height != self.image_size || image.width != self.image_size {
            return Err(Error::Shape(format!(
                "model expects {}x{}x{} images, got {}x{}x{}",
                self.channels, self.image_size, self.image_size, image.channels, image.height, image.width
            )));
        }
        Ok(())
    }

    /// Priors for raw images; uniform when the guidance model is disabled.
    pub fn priors(&self, images: &[&Image]) -> Result<Vec<PriorPair>> {
        images.iter().try_for_each(|im| self.check_image(im))?;
        match &self.dcg {
            Some(dcg) => dcg.priors(images),
            None => Ok(vec![PriorPair::uniform(self.classes); images.len()]),
        }
    }

    /// Image embeddings (`B × D`) of raw images.
    pub fn embed(&self, images: &[&Image]) -> Result<Vec<f32>> {
        let norm: Vec<Image> = images.iter().map(|im| im.normalized()).collect();
        let refs: Vec<&Image> = norm.iter().collect();
        self.encoder.infer(&refs)
    }

    /// Class probabilities of the plain classifier (`basic` only).
    pub fn classifier_probs(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Runtime("model has no classifier head".into()))?;
        let rho = self.embed(images)?;
        let logits = head.infer(&rho, images.len());
        Ok(logits.chunks(self.classes).map(softmax_f64).collect())
    }

    /// Parameters trained at the denoiser learning rate: encoder, denoiser, head.
    pub fn diffusion_group(&mut self) -> DiffusionGroup<'_> {
        DiffusionGroup(self)
    }
}

impl Module for Model {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        self.diffusion_group().visit(prefix, f);
        if let Some(dcg) = &mut self.dcg {
            dcg.visit(&join(prefix, "dcg"), f);
        }
    }
}

pub struct DiffusionGroup<'a>(&'a mut Model);

impl Module for DiffusionGroup<'_> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_>)) {
        let m = &mut *self.0;
        m.encoder.visit(&join(prefix, "encoder"), f);
        if let Some(h) = &mut m.head {
            h.visit(&join(prefix, "head"), f);
        }
        if let Some(d) = &mut m.denoiser {
            d.visit(&join(prefix, "denoiser"), f);
        }
    }
}
