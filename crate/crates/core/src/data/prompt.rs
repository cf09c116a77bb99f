//! Semi-handcrafted captions: a category name substituted into a template.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::synth::CategorySpec;
use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "[category]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBank {
    pub templates: Vec<String>,
}

const TRAINING_TEMPLATES: [&str; 12] = [
    "a photo and sound of [category]",
    "a picture and audio of [category]",
    "an image with the sound of [category]",
    "a recording and snapshot of [category]",
    "the sight and sound of [category]",
    "a video frame and clip of [category]",
    "a scene where you can hear [category]",
    "a clear photo and loud sound of [category]",
    "a blurry image and quiet sound of [category]",
    "a close up photo of [category] with its sound",
    "an outdoor scene of [category]",
    "[category] seen and heard in a short clip",
];

/// Held out from training; used to build zero-shot class prototypes.
const EVALUATION_TEMPLATES: [&str; 6] = [
    "a snapshot and recording of [category]",
    "the sound and image of [category]",
    "a photo of [category]",
    "the audio of [category]",
    "a clip showing [category]",
    "a good photo and sound of [category]",
];

impl PromptBank {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        let bank = Self { templates };
        bank.validate()?;
        Ok(bank)
    }

    pub fn training_default() -> Self {
        Self { templates: TRAINING_TEMPLATES.iter().map(|s| s.to_string()).collect() }
    }

    pub fn evaluation_default() -> Self {
        Self { templates: EVALUATION_TEMPLATES.iter().map(|s| s.to_string()).collect() }
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Config("prompt bank is empty".into()));
        }
        for (i, t) in self.templates.iter().enumerate() {
            let n = t.matches(PLACEHOLDER).count();
            if n != 1 {
                return Err(Error::Config(format!(
                    "template {i} ('{t}') has {n} '{PLACEHOLDER}' placeholders, expected 1"
                )));
            }
        }
        Ok(())
    }

    pub fn draw_index<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        self.validate()?;
        Ok(rng.random_range(0..self.templates.len()))
    }

    pub fn instantiate(&self, index: usize, category_name: &str) -> Result<String> {
        let t = self
            .templates
            .get(index)
            .ok_or_else(|| Error::Config(format!("template index {index} outside a bank of {}", self.len())))?;
        Ok(t.replacen(PLACEHOLDER, category_name, 1))
    }

    pub fn disjoint_from(&self, other: &PromptBank) -> bool {
        self.templates.iter().all(|t| !other.templates.contains(t))
    }

    /// Every whitespace-delimited word outside the placeholder.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.templates.iter().flat_map(|t| t.split_whitespace()).filter(|w| *w != PLACEHOLDER)
    }
}

/// One template drawn uniformly from `bank`, instantiated with the category name.
pub fn build_prompt_caption<R: Rng + ?Sized>(
    bank: &PromptBank,
    category: &CategorySpec,
    rng: &mut R,
) -> Result<String> {
    let i = bank.draw_index(rng)?;
    bank.instantiate(i, &category.name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::CategorySpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dog() -> CategorySpec {
        CategorySpec::derive(0, "dog barking", 17)
    }

    #[test]
    fn substitutes_category_name() {
        let bank = PromptBank::new(vec!["a photo and sound of [category]".into()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            assert_eq!(build_prompt_caption(&bank, &dog(), &mut rng).unwrap(), "a photo and sound of dog barking");
        }
    }

    #[test]
    fn same_rng_state_same_caption() {
        let bank = PromptBank::training_default();
        let a = build_prompt_caption(&bank, &dog(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = build_prompt_caption(&bank, &dog(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_template_names_its_index() {
        let bank = PromptBank { templates: vec!["ok [category]".into(), "no placeholder".into()] };
        let err = build_prompt_caption(&bank, &dog(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err().to_string();
        assert!(err.contains("template 1"), "{err}");
        let twice = PromptBank { templates: vec!["[category] and [category]".into()] };
        assert!(twice.validate().is_err());
        assert!(PromptBank { templates: vec![] }.validate().is_err());
    }

    #[test]
    fn shipped_banks_are_valid_and_disjoint() {
        let train = PromptBank::training_default();
        let eval = PromptBank::evaluation_default();
        train.validate().unwrap();
        eval.validate().unwrap();
        assert!(train.len() >= 8);
        assert!(train.disjoint_from(&eval));
    }
}
