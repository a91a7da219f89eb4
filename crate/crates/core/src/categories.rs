//! The closed registry of text-to-image task categories.
//!
//! Each category carries the generation rule the proposer must follow, the
//! rubric the judge ranks by, and a 0-10 scoring standard. The registry is
//! fixed at ten entries; configs and proposals referring to anything else
//! are rejected.

use std::fmt;

/// One task category: prompt-generation rule plus judging guidance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategorySpec {
    pub id: &'static str,
    pub name: &'static str,
    pub generation_rule: &'static str,
    pub judgement_rubric: &'static str,
    pub scoring_standard: &'static str,
    /// Round-robin schedule of target subcategories for the proposer.
    pub subcategories: &'static [&'static str],
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown category: {0:?} (the registry is closed)")]
pub struct UnknownCategory(pub String);

impl fmt::Display for CategorySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name)
    }
}

macro_rules! cat {
    ($id:literal, $name:literal, $rule:literal, $rubric:literal, $standard:literal, [$($sub:literal),+ $(,)?]) => {
        CategorySpec {
            id: $id,
            name: $name,
            generation_rule: $rule,
            judgement_rubric: $rubric,
            scoring_standard: $standard,
            subcategories: &[$($sub),+],
        }
    };
}

static REGISTRY: [CategorySpec; 10] = [
    cat!(
        "general_object",
        "General Object",
        "Depict specific real-world objects or scenes, focusing on attributes including shape, color, texture, and single/multi-object composition.",
        "Object existence, attribute accuracy (color/shape/texture), and compositional correctness.",
        "9-10: every object present with all stated attributes and composition correct. 7-8: all objects present with one minor attribute drift. 4-6: a required object or attribute is missing or wrong. 1-3: most attributes wrong or objects missing. 0: image unrelated to the prompt.",
        ["single object", "multi-object composition", "texture focus", "shape and color"]
    ),
    cat!(
        "object_relations",
        "Object Relations",
        "Reflect logical connections between objects, involving action & interaction, comparison, differentiation, or negation.",
        "Logical correctness of relations (e.g., A is interacting with B), in addition to basic object correctness.",
        "9-10: every stated relation rendered exactly, including any negation. 7-8: relations correct with one ambiguous pairing. 4-6: a relation inverted or missing. 1-3: objects present but relations ignored. 0: image unrelated to the prompt.",
        ["action & interaction", "comparison", "differentiation", "negation"]
    ),
    cat!(
        "general_knowledge",
        "General Knowledge",
        "Depict specific general elements requiring external knowledge in real life, such as festivals, sports, celebrities, religions, or crafts.",
        "Factual accuracy, cultural recognition, and attribute alignment with real-world entities.",
        "9-10: the real-world entity is depicted factually with recognizable distinguishing features. 7-8: recognizable with a minor factual slip. 4-6: generic depiction missing the knowledge-bearing detail. 1-3: factually wrong entity. 0: image unrelated to the prompt.",
        ["festivals", "sports", "celebrities", "religions", "crafts"]
    ),
    cat!(
        "spatio_reasoning",
        "Spatio Reasoning",
        "Handle complex spatial layouts, including 2D/3D structures, occlusion reasoning, and specific viewing perspectives (e.g., bird's-eye view).",
        "Spatial consistency, perspective correctness, and accurate handling of occlusions/depth.",
        "9-10: layout, perspective, and occlusions all match the prompt. 7-8: layout correct with slight perspective drift. 4-6: one spatial constraint violated. 1-3: arrangement contradicts the prompt. 0: image unrelated to the prompt.",
        ["2d layout", "3d structure", "occlusion", "viewing perspective"]
    ),
    cat!(
        "temporal_reasoning",
        "Temporal Reasoning",
        "Reflect time-sensitive states, such as horizontal time (synchronous elements) or longitudinal time (chronological changes/stages).",
        "Temporal consistency, logical progression of states, and accuracy of time-specific features.",
        "9-10: every time-dependent state depicted consistently. 7-8: correct period with one anachronistic detail. 4-6: a stated stage or simultaneous element missing. 1-3: temporal logic contradicted. 0: image unrelated to the prompt.",
        ["synchronous elements", "chronological change", "stages of a process"]
    ),
    cat!(
        "text_rendering",
        "Text Rendering",
        "Render legible text within images across various formats: natural-scene text, designed posters/menus, or handwriting/graffiti.",
        "OCR accuracy (spelling), font style appropriateness, and text-background integration.",
        "9-10: all required text rendered letter-perfect in a fitting style. 7-8: text legible with one spelling defect. 4-6: several words garbled or missing. 1-3: text illegible. 0: no text or image unrelated to the prompt.",
        ["natural-scene text", "poster design", "menu or signage", "handwriting", "graffiti"]
    ),
    cat!(
        "natural_science",
        "Natural Science",
        "Accurately represent scientific subjects, including precise anatomy of animals/plants and physics/chemistry phenomena.",
        "Scientific realism, biological anatomical correctness, and physical plausibility.",
        "9-10: scientifically accurate anatomy or phenomenon with correct detail. 7-8: plausible with one anatomical or physical slip. 4-6: visibly implausible detail. 1-3: depiction contradicts basic science. 0: image unrelated to the prompt.",
        ["animal anatomy", "plant anatomy", "physics phenomena", "chemistry phenomena"]
    ),
    cat!(
        "portrait",
        "Portrait",
        "Generate human-centered portraits with specific framing requirements: close-up, half-body, or full-body shots.",
        "Framing accuracy (shot scale), facial/anatomical correctness, and identity consistency.",
        "9-10: requested framing exact with correct anatomy throughout. 7-8: framing near-correct with minor anatomical flaw. 4-6: wrong shot scale or a visible anatomical error. 1-3: malformed subject. 0: no person or image unrelated to the prompt.",
        ["close-up", "half-body", "full-body"]
    ),
    cat!(
        "stylization",
        "Stylization",
        "Adhere to specific artistic styles, primarily focusing on Anime style or various artistic stylizations (e.g., oil painting, sketch).",
        "Style fidelity, aesthetic quality, and texture application consistent with the requested art medium.",
        "9-10: the requested style is unmistakable and applied uniformly. 7-8: style recognizable with patches of generic rendering. 4-6: style only loosely suggested. 1-3: wrong style. 0: image unrelated to the prompt.",
        ["anime style", "oil painting", "sketch", "watercolor"]
    ),
    cat!(
        "counting",
        "Counting",
        "Generate a precise number of specific objects as described in the prompt.",
        "Count accuracy (numerical precision) and object distinctness.",
        "9-10: exact count with each instance distinct. 7-8: exact count but instances partially merged. 4-6: off by one. 1-3: off by more than one. 0: image unrelated to the prompt.",
        ["small count", "large count", "mixed object counts"]
    ),
];

pub fn registry() -> &'static [CategorySpec; 10] {
    &REGISTRY
}

pub fn by_id(id: &str) -> Result<&'static CategorySpec, UnknownCategory> {
    REGISTRY
        .iter()
        .find(|c| c.id == id)
        .ok_or_else(|| UnknownCategory(id.to_string()))
}

pub fn by_name(name: &str) -> Result<&'static CategorySpec, UnknownCategory> {
    let wanted = name.trim();
    REGISTRY
        .iter()
        .find(|c| c.name.eq_ignore_ascii_case(wanted))
        .ok_or_else(|| UnknownCategory(name.to_string()))
}
