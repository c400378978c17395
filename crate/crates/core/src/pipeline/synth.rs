//! Seeded synthetic corpora with scripted caption and rewrite tables.
//!
//! Every video draws one word per attribute slot; its text names all slots.
//! Frames are noisy copies of the text embedding pushed through a fixed
//! random rotation plus a shared offset, so the two modalities start apart.
//! Captions live on the text side. For each prompt in a fixed chain a
//! caption is informative (names true attributes) with the prompt's
//! probability, otherwise it is drawn from an unrelated vocabulary. The
//! engineer script walks the chain one rewrite at a time and stops at its
//! last prompt.

use ndarray::{Array1, Array2};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedder::{LocalEmbedder, TextEmbedder};
use crate::error::{Error, Result};
use crate::gateway::{fingerprint, CaptionRule, MockScript, RewriteRule, DEFAULT_INITIAL_PROMPT};
use crate::model::{Corpus, CorpusPair, Split, TextRecord, VideoRecord, DEFAULT_MAX_TOKENS};

const SUBJECTS: &[&str] = &[
    "dog", "chef", "pianist", "toddler", "surfer", "robot", "farmer", "dancer", "cyclist", "parrot", "knight",
    "nurse", "skater", "monkey", "pilot", "violinist",
];
const ACTIONS: &[&str] = &[
    "juggles", "paints", "repairs", "chases", "washes", "carries", "throws", "inspects", "kicks", "stacks",
    "slices", "photographs", "polishes", "balances", "unwraps", "sketches",
];
const OBJECTS: &[&str] = &[
    "bicycle", "pumpkin", "kettle", "drum", "lantern", "sofa", "kayak", "guitar", "melon", "ladder", "teapot",
    "umbrella", "anchor", "tractor", "mirror", "basket",
];
const PLACES: &[&str] = &[
    "kitchen", "beach", "garage", "forest", "stadium", "library", "harbor", "desert", "rooftop", "subway",
    "meadow", "bakery", "canyon", "greenhouse", "carnival", "glacier",
];
const MOODS: &[&str] = &["cheerfully", "slowly", "carefully", "frantically", "quietly", "proudly"];

// Off-topic vocabulary for uninformative captions; no word overlaps the
// attribute lists above.
const NOISE_ADJ: &[&str] = &[
    "blurry", "grainy", "overexposed", "shaky", "dim", "saturated", "washed-out", "pixelated", "noisy", "tilted",
];
const NOISE_NOUN: &[&str] = &[
    "footage", "clip", "recording", "shot", "frame", "scene", "sequence", "montage", "take", "reel",
];
const NOISE_TAIL: &[&str] = &[
    "with muted colors", "without sound", "at low resolution", "with heavy vignetting", "from long ago",
    "of uncertain origin", "with flickering light", "on old film stock", "with odd framing", "with lens flare",
];

const PROMPT_CHAIN: &[&str] = &[
    DEFAULT_INITIAL_PROMPT,
    "Generate 10 captions about this video. Say who appears in it.",
    "Generate 10 captions about this video. Say who appears, what they do and to what.",
    "Generate 10 distinct captions about this video. Name who appears, the action, the object handled and the place, each from a different perspective.",
    "Generate 10 distinct, concrete captions about this video. Every caption names who appears, the action, the object handled and the place, each from a different perspective and in fresh wording.",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "d_videos")]
    pub num_videos: usize,
    #[serde(default = "d_frames")]
    pub frames: usize,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
    /// Signal-to-noise ratio of frames relative to their text.
    #[serde(default = "d_sep")]
    pub separability: f64,
    /// Weight of the shared offset added to every frame.
    #[serde(default = "d_offset")]
    pub modality_offset: f64,
    /// Probability of an informative caption for each prompt in the chain;
    /// the chain length follows this list (at most 5 prompts).
    #[serde(default = "d_info")]
    pub informativeness: Vec<f64>,
    /// Captions scripted per video and prompt.
    #[serde(default = "d_caps")]
    pub max_captions: usize,
    #[serde(default = "d_test")]
    pub test_fraction: f64,
    /// Seed of the local embedder used to place texts and captions.
    #[serde(default)]
    pub embed_seed: u64,
}

fn d_videos() -> usize {
    100
}
fn d_frames() -> usize {
    crate::model::DEFAULT_FRAMES
}
fn d_dim() -> usize {
    32
}
fn d_sep() -> f64 {
    1.0
}
fn d_offset() -> f64 {
    1.0
}
fn d_info() -> Vec<f64> {
    vec![0.2, 0.45, 0.7, 0.9]
}
fn d_caps() -> usize {
    crate::model::DEFAULT_CAPTIONS
}
fn d_test() -> f64 {
    0.5
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_videos: d_videos(),
            frames: d_frames(),
            dim: d_dim(),
            seed: 0,
            separability: d_sep(),
            modality_offset: d_offset(),
            informativeness: d_info(),
            max_captions: d_caps(),
            test_fraction: d_test(),
            embed_seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_videos == 0 || self.frames == 0 || self.dim < 2 || self.max_captions == 0 {
            return Err(Error::invalid("synthetic sizes must be at least 1 (dim at least 2)"));
        }
        if self.informativeness.is_empty() || self.informativeness.len() > PROMPT_CHAIN.len() {
            return Err(Error::invalid(format!(
                "informativeness needs 1..={} levels",
                PROMPT_CHAIN.len()
            )));
        }
        if self.informativeness.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("informativeness levels must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) || self.separability.is_nan() || self.separability <= 0.0 {
            return Err(Error::invalid("test_fraction must be in [0, 1) and separability positive"));
        }
        Ok(())
    }

    /// Prompt texts of the rewrite chain, initial prompt first.
    pub fn prompt_chain(&self) -> Vec<&'static str> {
        PROMPT_CHAIN[..self.informativeness.len()].to_vec()
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    /// Captions for every prompt of the chain plus the engineer's rewrites.
    pub script: MockScript,
    /// Attribute words of each video, in corpus order.
    pub attributes: Vec<[&'static str; 5]>,
}

fn attribute_text(a: &[&str; 5]) -> String {
    format!("a {} {} {} a {} in the {}", a[0], a[4], a[1], a[2], a[3])
}

fn informative_caption(a: &[&str; 5], rng: &mut impl Rng) -> String {
    let [s, act, obj, place, mood] = *a;
    let templates: [String; 8] = [
        format!("the {s} {act} a {obj}"),
        format!("a {s} seen in the {place}"),
        format!("{s} with a {obj} in the {place}"),
        format!("someone {act} a {obj} {mood}"),
        format!("a {obj} in the {place}"),
        format!("close view of the {s} who {act} things"),
        format!("{mood} the {s} {act} the {obj}"),
        format!("wide shot of the {place} with a {s}"),
    ];
    templates.choose(rng).expect("non-empty").clone()
}

fn noise_caption(rng: &mut impl Rng) -> String {
    format!(
        "{} {} {}",
        NOISE_ADJ.choose(rng).expect("non-empty"),
        NOISE_NOUN.choose(rng).expect("non-empty"),
        NOISE_TAIL.choose(rng).expect("non-empty")
    )
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
pub(crate) fn random_rotation(d: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((d, d));
    let mut j = 0;
    while j < d {
        let mut v = Array1::from_shape_fn(d, |_| StandardNormal.sample(rng));
        for k in 0..j {
            let qk = q.column(k).to_owned();
            let proj = v.dot(&qk);
            v.scaled_add(-proj, &qk);
        }
        let n = v.dot(&v).sqrt();
        if n < 1e-8 {
            continue;
        }
        q.column_mut(j).assign(&(v / n));
        j += 1;
    }
    q
}

fn gaussian(d: usize, scale: f64, rng: &mut impl Rng) -> Array1<f64> {
    let s = scale / (d as f64).sqrt();
    Array1::from_shape_fn(d, |_| {
        let z: f64 = StandardNormal.sample(rng);
        s * z
    })
}

pub fn synth_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let d = spec.dim;
    let embedder = LocalEmbedder::new(d, spec.embed_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rotation = random_rotation(d, &mut rng);
    let offset = gaussian(d, 1.0, &mut rng);
    let offset = &offset / offset.dot(&offset).sqrt() * spec.modality_offset;
    let noise = 1.0 / spec.separability;

    let n_test = (spec.num_videos as f64 * spec.test_fraction).round() as usize;
    let n_train = spec.num_videos - n_test;
    let chain = spec.prompt_chain();
    let mut pairs = Vec::with_capacity(spec.num_videos);
    let mut attributes = Vec::with_capacity(spec.num_videos);
    let mut script = MockScript {
        name: Some("synthetic".into()),
        ..Default::default()
    };
    for i in 0..spec.num_videos {
        let attrs = [
            *SUBJECTS.choose(&mut rng).expect("non-empty"),
            *ACTIONS.choose(&mut rng).expect("non-empty"),
            *OBJECTS.choose(&mut rng).expect("non-empty"),
            *PLACES.choose(&mut rng).expect("non-empty"),
            *MOODS.choose(&mut rng).expect("non-empty"),
        ];
        let id = format!("video{i:04}");
        let text = attribute_text(&attrs);
        let t = Array1::from(embedder.embed_text(&text)?.into_values());
        // per-video deviation shared by all frames, then per-frame jitter
        let shared = gaussian(d, noise, &mut rng);
        let mut frames = Array2::zeros((spec.frames, d));
        for mut row in frames.rows_mut() {
            let latent = &t + &shared + gaussian(d, noise, &mut rng);
            let mut f = rotation.dot(&latent) + &offset;
            let n = f.dot(&f).sqrt();
            f /= n;
            row.assign(&f);
        }
        for (prompt, &rho) in chain.iter().zip(&spec.informativeness) {
            let lines: Vec<String> = (0..spec.max_captions)
                .map(|_| {
                    if rng.random::<f64>() < rho {
                        informative_caption(&attrs, &mut rng)
                    } else {
                        noise_caption(&mut rng)
                    }
                })
                .collect();
            let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
            script.captions.push(CaptionRule::lines(&id, Some(&fingerprint(prompt)), &refs));
        }
        pairs.push(CorpusPair {
            video: VideoRecord {
                id: id.clone(),
                frames,
                source_ref: None,
                description: Some(text.clone()),
            },
            text: TextRecord::new(id, &text, DEFAULT_MAX_TOKENS),
            split: if i < n_train { Split::Train } else { Split::Test },
        });
        attributes.push(attrs);
    }
    for w in chain.windows(2) {
        script.rewrites.push(RewriteRule::to(&fingerprint(w[0]), &[w[1]]));
    }
    Ok(SynthCorpus {
        corpus: Corpus::new(pairs, DEFAULT_MAX_TOKENS)?,
        script,
        attributes,
    })
}
