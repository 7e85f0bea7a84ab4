//! Deterministic synthetic benchmark: a latent class geometry lifted into
//! raw image and text feature spaces, with rotated image domains for
//! domain-shift evaluation and held-out classes for zero-shot evaluation.
//!
//! Every sample carries a set of shared "context" attributes drawn from a
//! bank that is common to all classes. Images contain them; captions and
//! candidate texts describe them; class prompts do not.

use serde::{Deserialize, Serialize};

use crate::anchors::{attach_captions, CandidatePair, CaptionProvider, CaptionRecord, Sample};
use crate::error::{ArfError, Result};
use crate::evaluation::PromptTable;
use crate::numerics::{
    derive_seed, dot, gaussian_stream, l2_normalize, Matrix, RandomStream, Vector,
};

mod tag {
    pub const PROTOTYPES: u64 = 1;
    pub const LIFT_IMAGE: u64 = 2;
    pub const LIFT_TEXT: u64 = 3;
    pub const TEMPLATE: u64 = 4;
    pub const CONTEXT_BANK: u64 = 5;
    pub const DOMAINS: u64 = 6;
    pub const SAMPLE_CONTEXT: u64 = 7;
    pub const IMAGE_NOISE: u64 = 8;
    pub const TEXT_NOISE: u64 = 9;
}

const MAX_ROTATION_ATTEMPTS: u64 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub n_id_classes: usize,
    pub n_zsl_classes: usize,
    /// Domain 0 is the finetune domain; domains 1.. are shifted.
    pub n_domains: usize,
    pub d_latent: usize,
    pub d_img_raw: usize,
    pub d_txt_raw: usize,
    /// Pretraining pairs per class per domain.
    pub pretrain_per_class: usize,
    pub finetune_per_class: usize,
    /// Test samples per class in every evaluation split.
    pub test_per_class: usize,
    pub candidate_pool_size: usize,
    /// The candidate pool cycles through domains `0..candidate_domains`;
    /// 1 keeps it in the finetune domain.
    #[serde(default = "one")]
    pub candidate_domains: usize,
    pub sigma_img: f64,
    pub sigma_txt: f64,
    pub context_bank_size: usize,
    pub context_strength: f64,
    pub contexts_per_caption: usize,
    pub template_offset_scale: f64,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl GenConfig {
    /// A minimal configuration for quick checks.
    pub fn tiny(seed: u64, d_img_raw: usize, d_txt_raw: usize) -> Self {
        GenConfig {
            n_id_classes: 2,
            n_zsl_classes: 2,
            n_domains: 2,
            d_latent: d_img_raw.min(d_txt_raw).min(3),
            d_img_raw,
            d_txt_raw,
            pretrain_per_class: 4,
            finetune_per_class: 4,
            test_per_class: 2,
            candidate_pool_size: 8,
            candidate_domains: 1,
            sigma_img: 0.3,
            sigma_txt: 0.1,
            context_bank_size: 4,
            context_strength: 0.5,
            contexts_per_caption: 2,
            template_offset_scale: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ArfError::Config(m.to_string()));
        if self.n_id_classes < 2 || self.n_zsl_classes < 2 {
            return fail("n_id_classes and n_zsl_classes must be >= 2");
        }
        if self.n_domains < 1 {
            return fail("n_domains must be >= 1 (domain 0 always exists)");
        }
        if self.d_latent < 1 || self.d_latent > self.d_img_raw.min(self.d_txt_raw) {
            return fail("d_latent must be in [1, min(d_img_raw, d_txt_raw)]");
        }
        if self.contexts_per_caption > self.context_bank_size {
            return fail("contexts_per_caption exceeds context_bank_size");
        }
        if self.candidate_domains < 1 || self.candidate_domains > self.n_domains {
            return fail("candidate_domains must be in [1, n_domains]");
        }
        if self.candidate_pool_size < self.n_classes() {
            return fail("candidate pool must cover every class");
        }
        if self.finetune_per_class == 0 || self.test_per_class == 0 {
            return fail("finetune_per_class and test_per_class must be >= 1");
        }
        for (name, v) in [
            ("sigma_img", self.sigma_img),
            ("sigma_txt", self.sigma_txt),
            ("context_strength", self.context_strength),
            ("template_offset_scale", self.template_offset_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ArfError::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_id_classes + self.n_zsl_classes
    }
}

/// Seeded orthogonal matrix: Gram–Schmidt on a gaussian matrix, column by
/// column, with every pivot (the norm of the orthogonalized column) positive.
/// Columns that come out numerically dependent trigger a reseed.
pub fn random_rotation(seed: u64, d: usize) -> Result<Matrix> {
    if d == 0 {
        return Err(ArfError::InvalidArgument(
            "rotation dimension must be >= 1".into(),
        ));
    }
    for attempt in 0..MAX_ROTATION_ATTEMPTS {
        let s = if attempt == 0 {
            seed
        } else {
            derive_seed(seed, attempt)
        };
        if let Some(q) = gram_schmidt(&mut gaussian_stream(s), d) {
            return Ok(q);
        }
    }
    Err(ArfError::DependentColumns(d))
}

fn gram_schmidt(stream: &mut RandomStream, d: usize) -> Option<Matrix> {
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(d);
    for _ in 0..d {
        let mut v = stream.gaussian_vec(d, 1.0);
        let original = crate::numerics::norm(&v);
        // Two passes of modified Gram–Schmidt keep the result orthogonal to
        // machine precision.
        for _ in 0..2 {
            for q in &columns {
                let c = dot(q, &v);
                v.iter_mut().zip(q).for_each(|(x, qi)| *x -= c * qi);
            }
        }
        let pivot = crate::numerics::norm(&v);
        if pivot.is_nan() || pivot <= 1e-8 * original {
            return None;
        }
        v.iter_mut().for_each(|x| *x /= pivot);
        columns.push(v);
    }
    let mut m = Matrix::zeros(d, d);
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            m.set(i, j, *v);
        }
    }
    Some(m)
}

/// The generator's fixed geometry: class prototypes, lift maps, the context
/// bank, the prompt template offset, and the per-domain transforms.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    cfg: GenConfig,
    prototypes: Vec<Vec<f64>>,
    lift_image: Matrix,
    lift_text: Matrix,
    template_offset: Vec<f64>,
    context_bank: Vec<Vec<f64>>,
    /// `domains[0]` is `None` (identity).
    domains: Vec<Option<Matrix>>,
}

impl SyntheticWorld {
    pub fn new(cfg: &GenConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        let unit = |stream: &mut RandomStream, n: usize| -> Result<Vec<f64>> {
            Ok(l2_normalize(&stream.gaussian_vec(n, 1.0))?.into_vec())
        };

        let mut s = gaussian_stream(derive_seed(seed, tag::PROTOTYPES));
        let prototypes = (0..cfg.n_classes())
            .map(|_| unit(&mut s, cfg.d_latent))
            .collect::<Result<Vec<_>>>()?;

        let lift = |t: u64, rows: usize| {
            let mut s = gaussian_stream(derive_seed(seed, t));
            Matrix::from_vec(rows, cfg.d_latent, s.gaussian_vec(rows * cfg.d_latent, 1.0))
        };
        let lift_image = lift(tag::LIFT_IMAGE, cfg.d_img_raw)?;
        let lift_text = lift(tag::LIFT_TEXT, cfg.d_txt_raw)?;

        let mut s = gaussian_stream(derive_seed(seed, tag::TEMPLATE));
        let template_offset: Vec<f64> = unit(&mut s, cfg.d_txt_raw)?
            .into_iter()
            .map(|v| v * cfg.template_offset_scale)
            .collect();

        let mut s = gaussian_stream(derive_seed(seed, tag::CONTEXT_BANK));
        let context_bank = (0..cfg.context_bank_size)
            .map(|_| unit(&mut s, cfg.d_latent))
            .collect::<Result<Vec<_>>>()?;

        let domain_base = derive_seed(seed, tag::DOMAINS);
        let mut domains = vec![None];
        for d in 1..cfg.n_domains {
            domains.push(Some(random_rotation(
                domain_base ^ d as u64,
                cfg.d_img_raw,
            )?));
        }

        Ok(SyntheticWorld {
            cfg: cfg.clone(),
            prototypes,
            lift_image,
            lift_text,
            template_offset,
            context_bank,
            domains,
        })
    }

    pub fn config(&self) -> &GenConfig {
        &self.cfg
    }

    pub fn domain_transform(&self, domain: usize) -> Option<&Matrix> {
        self.domains.get(domain).and_then(|d| d.as_ref())
    }

    /// Context bank indices describing item `id`.
    pub fn contexts(&self, id: u64) -> Vec<usize> {
        let mut s = RandomStream::new(derive_seed(
            derive_seed(self.cfg.seed, tag::SAMPLE_CONTEXT),
            id,
        ));
        s.choose_distinct(self.cfg.context_bank_size, self.cfg.contexts_per_caption)
    }

    /// `μ_c + ρ Σ_{j ∈ ctx(id)} κ_j`
    fn latent(&self, class_id: u32, id: u64) -> Vec<f64> {
        let mut z = self.prototypes[class_id as usize].clone();
        for j in self.contexts(id) {
            for (zi, k) in z.iter_mut().zip(&self.context_bank[j]) {
                *zi += self.cfg.context_strength * k;
            }
        }
        z
    }

    /// `R_domain (M_img z + σ_img ε)`
    pub fn image_feature(&self, class_id: u32, domain: u32, id: u64) -> Vector {
        let z = self.latent(class_id, id);
        let mut x = self.lift_image.matvec(&z);
        let mut noise = gaussian_stream(derive_seed(
            derive_seed(self.cfg.seed, tag::IMAGE_NOISE),
            id,
        ));
        for xi in x.iter_mut() {
            *xi += self.cfg.sigma_img * noise.gaussian();
        }
        let x = match self.domain_transform(domain as usize) {
            Some(r) => r.matvec(&x),
            None => x,
        };
        Vector::from_vec_unchecked(x)
    }

    /// `M_txt μ_c + ρ Σ_j M_txt κ_j + η`, i.e. the class text plus a
    /// description of the item's contexts.
    pub fn caption_feature(&self, class_id: u32, id: u64) -> Vector {
        let z = self.latent(class_id, id);
        let mut t = self.lift_text.matvec(&z);
        let mut noise =
            gaussian_stream(derive_seed(derive_seed(self.cfg.seed, tag::TEXT_NOISE), id));
        for ti in t.iter_mut() {
            *ti += self.cfg.sigma_txt * noise.gaussian();
        }
        Vector::from_vec_unchecked(t)
    }

    /// `M_txt μ_c`, the class-only text semantics.
    pub fn class_text(&self, class_id: u32) -> Vec<f64> {
        self.lift_text.matvec(&self.prototypes[class_id as usize])
    }

    /// `M_txt μ_c + template offset`
    pub fn prompt_feature(&self, class_id: u32) -> Vector {
        let mut t = self.class_text(class_id);
        for (ti, o) in t.iter_mut().zip(&self.template_offset) {
            *ti += o;
        }
        Vector::from_vec_unchecked(t)
    }

    pub fn prompt_table(&self, classes: &[u32]) -> Result<PromptTable> {
        let rows: Vec<Vector> = classes.iter().map(|&c| self.prompt_feature(c)).collect();
        PromptTable::new(
            classes.to_vec(),
            Matrix::from_rows(self.cfg.d_txt_raw, rows.iter().map(|r| r.as_slice()))?,
        )
    }
}

/// Caption provider backed by the generator; deterministic per
/// `(sample id, config seed)`.
#[derive(Clone, Debug)]
pub struct SyntheticCaptionProvider {
    world: SyntheticWorld,
}

impl SyntheticCaptionProvider {
    pub fn new(cfg: &GenConfig) -> Result<Self> {
        Ok(SyntheticCaptionProvider {
            world: SyntheticWorld::new(cfg)?,
        })
    }

    pub fn from_world(world: SyntheticWorld) -> Self {
        SyntheticCaptionProvider { world }
    }
}

impl CaptionProvider for SyntheticCaptionProvider {
    fn caption(&self, sample: &Sample) -> Option<Vector> {
        if sample.class_id as usize >= self.world.cfg.n_classes() {
            return None;
        }
        Some(self.world.caption_feature(sample.class_id, sample.id))
    }
}

/// Caption feature for item `id` of class `class_id`.
pub fn synth_caption_provider(cfg: &GenConfig, class_id: u32, id: u64) -> Result<Vector> {
    let world = SyntheticWorld::new(cfg)?;
    if class_id as usize >= cfg.n_classes() {
        return Err(ArfError::InvalidArgument(format!(
            "class {class_id} does not exist"
        )));
    }
    Ok(world.caption_feature(class_id, id))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSplit {
    pub domain: u32,
    pub samples: Vec<Sample>,
}

impl DomainSplit {
    pub fn name(&self) -> String {
        format!("ds_{}", self.domain)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkBundle {
    pub gen: GenConfig,
    pub id_classes: Vec<u32>,
    pub zsl_classes: Vec<u32>,
    pub pretrain_pool: Vec<CandidatePair>,
    pub finetune: Vec<Sample>,
    pub captions: Vec<CaptionRecord>,
    pub prompts_id: PromptTable,
    pub prompts_zsl: PromptTable,
    pub candidates: Vec<CandidatePair>,
    pub id_test: Vec<Sample>,
    pub ds_tests: Vec<DomainSplit>,
    pub zsl_test: Vec<Sample>,
}

struct IdAllocator(u64);

impl IdAllocator {
    fn next(&mut self) -> u64 {
        let id = self.0;
        self.0 += 1;
        id
    }
}

pub fn generate_benchmark(cfg: &GenConfig) -> Result<BenchmarkBundle> {
    let world = SyntheticWorld::new(cfg)?;
    let id_classes: Vec<u32> = (0..cfg.n_id_classes as u32).collect();
    let zsl_classes: Vec<u32> = (cfg.n_id_classes as u32..cfg.n_classes() as u32).collect();
    let all_classes: Vec<u32> = (0..cfg.n_classes() as u32).collect();
    let mut ids = IdAllocator(0);

    let pair = |ids: &mut IdAllocator, class: u32, domain: u32| {
        let id = ids.next();
        CandidatePair {
            id,
            image_feature: world.image_feature(class, domain, id),
            text_feature: world.caption_feature(class, id),
        }
    };
    let samples =
        |ids: &mut IdAllocator, classes: &[u32], domain: u32, per_class: usize| -> Vec<Sample> {
            let mut out = Vec::with_capacity(classes.len() * per_class);
            for &class_id in classes {
                for _ in 0..per_class {
                    let id = ids.next();
                    out.push(Sample {
                        id,
                        feature: world.image_feature(class_id, domain, id),
                        class_id,
                        domain_id: domain,
                    });
                }
            }
            out
        };

    let mut pretrain_pool =
        Vec::with_capacity(cfg.n_classes() * cfg.n_domains * cfg.pretrain_per_class);
    for &class in &all_classes {
        for domain in 0..cfg.n_domains as u32 {
            for _ in 0..cfg.pretrain_per_class {
                pretrain_pool.push(pair(&mut ids, class, domain));
            }
        }
    }

    let finetune = samples(&mut ids, &id_classes, 0, cfg.finetune_per_class);

    let candidates: Vec<CandidatePair> = (0..cfg.candidate_pool_size)
        .map(|i| {
            let n = all_classes.len();
            pair(
                &mut ids,
                all_classes[i % n],
                ((i / n) % cfg.candidate_domains) as u32,
            )
        })
        .collect();

    let id_test = samples(&mut ids, &id_classes, 0, cfg.test_per_class);
    let ds_tests: Vec<DomainSplit> = (1..cfg.n_domains as u32)
        .map(|domain| DomainSplit {
            domain,
            samples: samples(&mut ids, &id_classes, domain, cfg.test_per_class),
        })
        .collect();
    let zsl_test = samples(&mut ids, &zsl_classes, 0, cfg.test_per_class);

    let provider = SyntheticCaptionProvider::from_world(world.clone());
    let captions = attach_captions(&finetune, &provider)?;

    Ok(BenchmarkBundle {
        gen: cfg.clone(),
        prompts_id: world.prompt_table(&id_classes)?,
        prompts_zsl: world.prompt_table(&zsl_classes)?,
        id_classes,
        zsl_classes,
        pretrain_pool,
        finetune,
        captions,
        candidates,
        id_test,
        ds_tests,
        zsl_test,
    })
}
