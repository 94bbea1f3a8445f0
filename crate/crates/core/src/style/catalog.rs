//! Bundled catalog of 50 procedural styles and the synthetic text-image pair
//! corpus used to fit the correction network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::cfcm::FeaturePair;
use super::encoder::{l2_normalize, tokenize, StyleEncoder};
use crate::image_buf::ImageBuffer;

pub const CATALOG_SIZE: usize = 50;

const TITLES: [&str; CATALOG_SIZE] = [
    "starry night",
    "water lilies",
    "the scream",
    "great wave",
    "sunflowers",
    "composition red",
    "guernica",
    "persistence",
    "kiss",
    "wheatfield",
    "impression sunrise",
    "nighthawks",
    "black square",
    "broadway boogie",
    "haystacks",
    "blue nude",
    "self portrait",
    "dance",
    "cafe terrace",
    "irises",
    "red vineyard",
    "poppies",
    "almond blossom",
    "garden",
    "harbor",
    "cathedral",
    "bridge",
    "mountain",
    "lighthouse",
    "forest",
    "meadow",
    "snow scene",
    "river bend",
    "autumn",
    "city lights",
    "seascape",
    "desert",
    "orchard",
    "storm",
    "dawn",
    "dusk",
    "circus",
    "market",
    "village",
    "chapel",
    "tower",
    "lagoon",
    "canyon",
    "glacier",
    "jungle",
];

const ARTISTS: [&str; 12] = [
    "van gogh",
    "monet",
    "munch",
    "hokusai",
    "mondrian",
    "picasso",
    "dali",
    "klimt",
    "matisse",
    "hopper",
    "malevich",
    "kandinsky",
];

const MOVEMENTS: [&str; 8] = [
    "impressionism",
    "expressionism",
    "cubism",
    "ukiyo e",
    "suprematism",
    "fauvism",
    "surrealism",
    "pointillism",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Swirl,
    Stripes,
    Checks,
    Dots,
    Waves,
    Noise,
}

/// One catalog style: naming metadata and a procedural image recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct CatalogEntry {
    pub id: String,
    pub title: String,
    pub artist: Option<String>,
    pub movement: Option<String>,
    pub pattern: Pattern,
    pub palette: [[f64; 3]; 3],
    pub frequency: f64,
    pub seed: u64,
}

impl CatalogEntry {
    /// Text prompts in the six template forms, skipping forms whose fields are missing.
    pub fn prompts(&self) -> Vec<String> {
        let t = &self.title;
        let mut out = vec![format!("a picture of {t}")];
        if let Some(a) = &self.artist {
            out.push(format!("a picture of {a}'s {t}"));
            out.push(format!("a picture of {t} by {a}"));
        }
        if let Some(m) = &self.movement {
            out.push(format!("a picture of {t} in the style of {m}"));
            if let Some(a) = &self.artist {
                out.push(format!("a picture of {a}'s {t} in the style of {m}"));
                out.push(format!("a picture of {t} by {a} in the style of {m}"));
            }
        }
        out
    }

    pub fn render(&self, size: usize) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let phase: [f64; 4] = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
        let f = self.frequency;
        let [c0, c1, c2] = self.palette;
        let jitter: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-0.06..0.06)).collect();
        ImageBuffer::from_fn(size, size, |x, y| {
            let u = x as f64 / size as f64;
            let v = y as f64 / size as f64;
            let tau = std::f64::consts::TAU;
            let s = match self.pattern {
                Pattern::Swirl => {
                    let (dx, dy) = (u - 0.5, v - 0.5);
                    let r = (dx * dx + dy * dy).sqrt();
                    0.5 + 0.5 * (tau * (f * r + phase[0]) + 3.0 * dy.atan2(dx)).sin()
                }
                Pattern::Stripes => 0.5 + 0.5 * (tau * (f * (u + 0.3 * v) + phase[0])).sin(),
                Pattern::Checks => {
                    let a = ((f * u + phase[0]).floor() + (f * v + phase[1]).floor()) as i64;
                    if a.rem_euclid(2) == 0 {
                        0.15
                    } else {
                        0.85
                    }
                }
                Pattern::Dots => {
                    let (fx, fy) = ((f * u + phase[0]).fract() - 0.5, (f * v + phase[1]).fract() - 0.5);
                    if fx * fx + fy * fy < 0.09 {
                        1.0
                    } else {
                        0.0
                    }
                }
                Pattern::Waves => {
                    0.5 + 0.25 * (tau * (f * u + phase[0])).sin() + 0.25 * (tau * (f * v + 2.0 * u + phase[1])).sin()
                }
                Pattern::Noise => {
                    let a = (tau * (f * u + phase[0])).sin() * (tau * (f * 1.3 * v + phase[1])).cos();
                    let b = (tau * (f * 0.7 * (u + v) + phase[2])).sin();
                    0.5 + 0.25 * a + 0.25 * b
                }
            };
            let s = (s + jitter[y * size + x]).clamp(0.0, 1.0);
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                rgb[c] = if s < 0.5 {
                    c0[c] + (c1[c] - c0[c]) * (s * 2.0)
                } else {
                    c1[c] + (c2[c] - c1[c]) * (s * 2.0 - 1.0)
                };
            }
            rgb
        })
    }
}

const PATTERNS: [Pattern; 6] = [
    Pattern::Swirl,
    Pattern::Stripes,
    Pattern::Checks,
    Pattern::Dots,
    Pattern::Waves,
    Pattern::Noise,
];

fn random_recipe(rng: &mut ChaCha8Rng) -> ([[f64; 3]; 3], f64) {
    let mut color = || {
        [
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..1.0),
        ]
    };
    let palette = [color(), color(), color()];
    (palette, rng.gen_range(2.0..9.0))
}

/// The fixed 50-entry catalog.
pub fn catalog() -> Vec<CatalogEntry> {
    TITLES
        .iter()
        .enumerate()
        .map(|(i, title)| {
            let mut rng = ChaCha8Rng::seed_from_u64(0xca7a_1090 + i as u64);
            let (palette, frequency) = random_recipe(&mut rng);
            CatalogEntry {
                id: title.replace(' ', "_"),
                title: title.to_string(),
                artist: (i % 5 != 4).then(|| ARTISTS[i % ARTISTS.len()].to_string()),
                movement: (i % 7 != 6).then(|| MOVEMENTS[(i * 3) % MOVEMENTS.len()].to_string()),
                pattern: PATTERNS[i % PATTERNS.len()],
                palette,
                frequency,
                seed: 0x57_7e00 + i as u64,
            }
        })
        .collect()
}

/// Style image for a text prompt, standing in for a text-to-image model.
///
/// A prompt naming a catalog title renders that entry; any other prompt gets
/// a procedural recipe seeded by its tokens.
pub fn text_style_image(text: &str, size: usize) -> ImageBuffer {
    let tokens = tokenize(text);
    let joined = format!(" {} ", tokens.join(" "));
    let entries = catalog();
    if let Some(e) = entries.iter().find(|e| joined.contains(&format!(" {} ", e.title))) {
        return e.render(size);
    }
    let digest = Sha256::digest(tokens.join(" ").as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (palette, frequency) = random_recipe(&mut rng);
    CatalogEntry {
        id: String::new(),
        title: tokens.join(" "),
        artist: None,
        movement: None,
        pattern: PATTERNS[rng.gen_range(0..PATTERNS.len())],
        palette,
        frequency,
        seed,
    }
    .render(size)
}

/// Feature pairs plus provenance counts.
#[derive(Clone, Debug, PartialEq)]
pub struct PairCorpus {
    pub pairs: Vec<FeaturePair>,
    /// Pairs built from catalog prompts and their rendered images.
    pub catalog_pairs: usize,
    /// Pairs whose image side is the text feature plus a shared bias and noise.
    pub bias_pairs: usize,
}

const VOCABULARY: [&str; 24] = [
    "bold", "soft", "vivid", "muted", "warm", "cold", "dreamy", "gritty", "bright", "dark", "oil", "ink", "pastel",
    "neon", "rough", "smooth", "painting", "sketch", "mosaic", "print", "light", "shadow", "texture", "color",
];

/// Deterministic corpus: every catalog prompt paired with its image feature,
/// and `bias_pairs` random vocabulary phrases paired with their text feature
/// shifted by one seeded bias vector plus small noise.
pub fn pair_corpus(encoder: &dyn StyleEncoder, bias_pairs: usize, seed: u64) -> PairCorpus {
    let d = encoder.dim();
    let mut pairs = Vec::new();
    for entry in catalog() {
        let image = encoder.encode_image(&entry.render(48));
        for prompt in entry.prompts() {
            let text = encoder.encode_text(&prompt).expect("prompts are nonempty");
            pairs.push(FeaturePair {
                text,
                image: image.clone(),
            });
        }
    }
    let catalog_pairs = pairs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6269_6173);
    let mut bias: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    l2_normalize(&mut bias);
    for _ in 0..bias_pairs {
        let words = rng.gen_range(2..6);
        let phrase: Vec<&str> = (0..words)
            .map(|_| VOCABULARY[rng.gen_range(0..VOCABULARY.len())])
            .collect();
        let text = encoder.encode_text(&phrase.join(" ")).expect("phrase is nonempty");
        let image = text
            .iter()
            .zip(&bias)
            .map(|(t, b)| t + b + rng.gen_range(-0.02..0.02))
            .collect();
        pairs.push(FeaturePair { text, image });
    }
    PairCorpus {
        pairs,
        catalog_pairs,
        bias_pairs,
    }
}
