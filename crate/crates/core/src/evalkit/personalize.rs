use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compose::{compose_generate, GuidanceConfig};
use crate::error::Result;
use crate::model::ModelBundle;
use crate::prompt::PromptSpec;
use crate::seed;
use crate::synthdata::{classify_all, render, AttrId, AttrScene, AttributeName, Image};

/// Generates an image from attribute references and an optional prompt.
pub trait Personalizer {
    fn generate(&self, refs: &[(&Image, AttributeName)], prompt: Option<PromptSpec>, seed: u64) -> Result<Image>;
}

/// Euler sampling under composed guidance with one weight for every reference.
pub struct GuidedSampler<'a> {
    pub bundle: &'a ModelBundle,
    pub steps: usize,
    pub weight: f64,
    pub text_cfg: f64,
}

impl Personalizer for GuidedSampler<'_> {
    fn generate(&self, refs: &[(&Image, AttributeName)], prompt: Option<PromptSpec>, seed: u64) -> Result<Image> {
        let owned: Vec<(Image, AttributeName)> = refs.iter().map(|(i, a)| ((*i).clone(), *a)).collect();
        let g = GuidanceConfig { weights: vec![self.weight; refs.len()], text_cfg: self.text_cfg };
        compose_generate(self.bundle, &owned, prompt, &g, self.steps, seed)
    }
}

fn random_name<R: Rng + ?Sized>(attr: AttrId, rng: &mut R) -> AttributeName {
    let forms: Vec<AttributeName> = AttributeName::forms(attr).collect();
    *forms.choose(rng).expect("every attribute has a name")
}

/// One reference image and attribute, and a prompt that leaves the
/// referenced field unspecified.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonalizationCase {
    pub reference: AttrScene,
    pub attr: AttributeName,
    pub prompt: PromptSpec,
    pub seed: u64,
}

/// `per_attribute` cases for every attribute. The prompt fixes every other
/// field to values drawn independently of the reference.
pub fn personalization_cases(seed: u64, per_attribute: usize) -> Vec<PersonalizationCase> {
    let mut rng = seed::rng(seed, seed::stream::PERSONALIZE);
    let mut cases = Vec::with_capacity(6 * per_attribute);
    for &attr in AttrId::ALL {
        for _ in 0..per_attribute {
            let reference = AttrScene::random(&mut rng);
            let target = AttrScene::random(&mut rng);
            let others: Vec<AttrId> = AttrId::ALL.iter().copied().filter(|&a| a != attr).collect();
            cases.push(PersonalizationCase {
                reference,
                attr: random_name(attr, &mut rng),
                prompt: PromptSpec::from_scene(&target, &others),
                seed: rng.random(),
            });
        }
    }
    cases
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationReport {
    /// Oracle match rate on the referenced attribute.
    pub attr_fidelity: f64,
    /// Mean oracle match rate over prompt-specified fields.
    pub text_fidelity: f64,
    /// Fraction of generations the oracle reads with confidence on every field.
    pub naturalness: f64,
    /// Attribute fidelity per referenced attribute.
    pub per_attribute: Vec<(String, f64)>,
    pub cases: usize,
}

pub fn personalization_score<P: Personalizer + ?Sized>(
    model: &P,
    cases: &[PersonalizationCase],
    side: usize,
) -> Result<PersonalizationReport> {
    let (mut attr_hits, mut text, mut natural) = (0usize, 0.0, 0usize);
    let mut per = [(0usize, 0usize); 6];
    for case in cases {
        let reference = render(&case.reference, side)?;
        let out = model.generate(&[(&reference, case.attr)], Some(case.prompt), case.seed)?;
        let read = classify_all(&out);
        let a = case.attr.id.index();
        let hit = read[a].value == case.reference.value(case.attr.id);
        attr_hits += hit as usize;
        per[a].0 += hit as usize;
        per[a].1 += 1;
        let fields = case.prompt.specified();
        if !fields.is_empty() {
            let ok = fields.iter().filter(|&&f| Some(read[f.index()].value) == case.prompt.get(f)).count();
            text += ok as f64 / fields.len() as f64;
        }
        natural += read.iter().all(|c| !c.low_confidence) as usize;
    }
    let n = cases.len().max(1) as f64;
    Ok(PersonalizationReport {
        attr_fidelity: attr_hits as f64 / n,
        text_fidelity: text / n,
        naturalness: natural as f64 / n,
        per_attribute: AttrId::ALL
            .iter()
            .filter(|a| per[a.index()].1 > 0)
            .map(|a| (a.name().to_string(), per[a.index()].0 as f64 / per[a.index()].1 as f64))
            .collect(),
        cases: cases.len(),
    })
}

/// References taken from different images, one attribute each, and a
/// prompt over the remaining fields.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositionCase {
    pub refs: Vec<(AttrScene, AttributeName)>,
    pub prompt: Option<PromptSpec>,
    pub seed: u64,
}

pub fn composition_cases(seed: u64, count: usize, attrs: &[AttrId]) -> Vec<CompositionCase> {
    let mut rng = seed::rng(seed, seed::stream::COMPOSE);
    (0..count)
        .map(|_| {
            let refs = attrs.iter().map(|&a| (AttrScene::random(&mut rng), random_name(a, &mut rng))).collect();
            let target = AttrScene::random(&mut rng);
            let others: Vec<AttrId> = AttrId::ALL.iter().copied().filter(|a| !attrs.contains(a)).collect();
            let prompt = (!others.is_empty()).then(|| PromptSpec::from_scene(&target, &others));
            CompositionCase { refs, prompt, seed: rng.random() }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    /// Fraction of generations matching every reference.
    pub joint: f64,
    /// Match rate of each reference position.
    pub per_reference: Vec<f64>,
    pub cases: usize,
}

pub fn composition_score<P: Personalizer + ?Sized>(model: &P, cases: &[CompositionCase], side: usize) -> Result<CompositionReport> {
    let width = cases.iter().map(|c| c.refs.len()).max().unwrap_or(0);
    let mut per = vec![0usize; width];
    let mut joint = 0usize;
    for case in cases {
        let images: Vec<Image> = case.refs.iter().map(|(s, _)| render(s, side)).collect::<Result<_>>()?;
        let refs: Vec<(&Image, AttributeName)> = images.iter().zip(&case.refs).map(|(i, (_, a))| (i, *a)).collect();
        let read = classify_all(&model.generate(&refs, case.prompt, case.seed)?);
        let mut all = true;
        for (k, (scene, name)) in case.refs.iter().enumerate() {
            let ok = read[name.id.index()].value == scene.value(name.id);
            per[k] += ok as usize;
            all &= ok;
        }
        joint += all as usize;
    }
    let n = cases.len().max(1) as f64;
    Ok(CompositionReport {
        joint: joint as f64 / n,
        per_reference: per.iter().map(|&c| c as f64 / n).collect(),
        cases: cases.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::decode_exact;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Fills prompt fields, takes referenced fields from the reference
    /// images, and draws the rest at random.
    struct Ideal {
        use_refs: bool,
    }

    impl Personalizer for Ideal {
        fn generate(&self, refs: &[(&Image, AttributeName)], prompt: Option<PromptSpec>, seed: u64) -> Result<Image> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut scene = AttrScene::random(&mut rng);
            for &attr in AttrId::ALL {
                if let Some(v) = prompt.and_then(|p| p.get(attr)) {
                    scene = scene.with_value(attr, v);
                }
            }
            if self.use_refs {
                for (img, name) in refs {
                    let src = decode_exact(img).expect("clean reference");
                    scene = scene.with_value(name.id, src.value(name.id));
                }
            }
            render(&scene, img_side(refs))
        }
    }

    fn img_side(refs: &[(&Image, AttributeName)]) -> usize {
        refs.first().map_or(32, |(i, _)| i.width)
    }

    /// Returns the first reference unchanged.
    struct Copy;

    impl Personalizer for Copy {
        fn generate(&self, refs: &[(&Image, AttributeName)], _: Option<PromptSpec>, _: u64) -> Result<Image> {
            Ok(refs[0].0.clone())
        }
    }

    #[test]
    fn cases_never_prompt_the_referenced_field() {
        let cases = personalization_cases(0, 20);
        assert_eq!(cases.len(), 120);
        for c in &cases {
            assert_eq!(c.prompt.get(c.attr.id), None);
            assert_eq!(c.prompt.specified().len(), 5);
        }
        assert_eq!(cases, personalization_cases(0, 20));
    }

    #[test]
    fn ideal_model_scores_perfectly() {
        let r = personalization_score(&Ideal { use_refs: true }, &personalization_cases(1, 5), 32).unwrap();
        assert_eq!((r.attr_fidelity, r.text_fidelity, r.naturalness), (1.0, 1.0, 1.0));
    }

    #[test]
    fn ignoring_references_gives_chance_attribute_fidelity() {
        let cases = personalization_cases(2, 60);
        let r = personalization_score(&Ideal { use_refs: false }, &cases, 32).unwrap();
        let chance = AttrId::ALL.iter().map(|a| 1.0 / a.cardinality() as f64).sum::<f64>() / 6.0;
        assert!((r.attr_fidelity - chance).abs() < 0.1, "{} vs {chance}", r.attr_fidelity);
        assert_eq!(r.text_fidelity, 1.0);
    }

    #[test]
    fn copying_the_reference_collapses_text_fidelity() {
        let cases = personalization_cases(3, 60);
        let r = personalization_score(&Copy, &cases, 32).unwrap();
        assert_eq!(r.attr_fidelity, 1.0);
        let chance = AttrId::ALL.iter().map(|a| 1.0 / a.cardinality() as f64).sum::<f64>() / 6.0;
        assert!((r.text_fidelity - chance).abs() < 0.1, "{} vs {chance}", r.text_fidelity);
    }

    #[test]
    fn composition_scoring() {
        let cases = composition_cases(4, 30, &[AttrId::ObjectColor, AttrId::ObjectShape]);
        assert!(cases.iter().all(|c| c.prompt.unwrap().specified().len() == 4));
        let r = composition_score(&Ideal { use_refs: true }, &cases, 32).unwrap();
        assert_eq!(r.joint, 1.0);
        let copy = composition_score(&Copy, &cases, 32).unwrap();
        assert_eq!(copy.per_reference[0], 1.0);
        assert!(copy.joint < 0.6);
    }
}
