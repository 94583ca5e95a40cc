//! Natural-language commands: templates, paraphrase expansion, vocabulary,
//! tokenization and the construction of (scene, command, labelled grasps)
//! samples.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{theta_to_class, Grasp5D, OrientationClass};
use crate::scene::{registry, Scene};

pub const SLOT: &str = "<obj>";
pub const UNK: &str = "<unk>";

pub const BASE_TEMPLATES: &str = include_str!("../assets/templates.txt");
pub const BASE_GRAMMAR: &str = include_str!("../assets/grammar.txt");

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("template must contain exactly one {SLOT} slot: {0:?}")]
    SlotCount(String),
    #[error("unknown category {0}")]
    UnknownCategory(usize),
    #[error("cannot tokenize an empty command")]
    EmptyCommand,
    #[error("grammar line {line}: {msg}")]
    Grammar { line: usize, msg: String },
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("no_target_ratio must be in [0, 1), got {0}")]
    Ratio(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn is_slot(tok: &str) -> bool {
    tok == SLOT || tok == "⟨obj⟩"
}

/// Word sequence with exactly one object slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CommandTemplate {
    tokens: Vec<String>,
}

impl CommandTemplate {
    pub fn new(tokens: Vec<String>) -> Result<Self, CommandError> {
        let tokens: Vec<String> = tokens
            .into_iter()
            .map(|t| if is_slot(&t) { SLOT.to_string() } else { t })
            .collect();
        if tokens.iter().filter(|t| *t == SLOT).count() != 1 {
            return Err(CommandError::SlotCount(tokens.join(" ")));
        }
        Ok(Self { tokens })
    }

    pub fn parse(line: &str) -> Result<Self, CommandError> {
        Self::new(line.split_whitespace().map(str::to_string).collect())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Case-folded form used for deduplication.
    fn key(&self) -> String {
        self.tokens
            .iter()
            .map(|t| t.to_lowercase())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl fmt::Display for CommandTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tokens.join(" "))
    }
}

/// One template per line, `#` comments.
pub fn parse_templates(text: &str) -> Result<Vec<CommandTemplate>, CommandError> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(CommandTemplate::parse)
        .collect()
}

pub fn load_templates(path: &Path) -> Result<Vec<CommandTemplate>, CommandError> {
    parse_templates(&std::fs::read_to_string(path)?)
}

pub fn write_templates(templates: &[CommandTemplate]) -> String {
    templates.iter().map(|t| format!("{t}\n")).collect()
}

pub fn base_templates() -> Vec<CommandTemplate> {
    parse_templates(BASE_TEMPLATES).expect("shipped templates are well-formed")
}

/// `*` on the left captures one or more tokens and is re-emitted on the right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reordering {
    pattern: Vec<String>,
    replacement: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParaphraseGrammar {
    pub synonyms: Vec<Vec<Vec<String>>>,
    pub reorderings: Vec<Reordering>,
    pub per_round: usize,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(|w| w.to_lowercase()).collect()
}

impl ParaphraseGrammar {
    pub fn parse(text: &str) -> Result<Self, CommandError> {
        let mut g = ParaphraseGrammar { per_round: 11, ..Default::default() };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |msg: &str| CommandError::Grammar { line: i + 1, msg: msg.to_string() };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (kind, rest) = line.split_once(':').ok_or_else(|| err("expected `kind: body`"))?;
            match kind.trim() {
                "syn" => {
                    let set: Vec<Vec<String>> = rest.split('|').map(words).filter(|p| !p.is_empty()).collect();
                    if set.len() < 2 {
                        return Err(err("a synonym set needs at least two phrases"));
                    }
                    g.synonyms.push(set);
                }
                "perm" => {
                    let (lhs, rhs) = rest.split_once("=>").ok_or_else(|| err("expected `pattern => replacement`"))?;
                    let (pattern, replacement) = (words(lhs), words(rhs));
                    if pattern.iter().filter(|t| *t == "*").count() > 1
                        || replacement.iter().filter(|t| *t == "*").count() > 1
                    {
                        return Err(err("at most one `*` per side"));
                    }
                    if pattern.is_empty() {
                        return Err(err("empty pattern"));
                    }
                    g.reorderings.push(Reordering { pattern, replacement });
                }
                "per_round" => {
                    g.per_round = rest.trim().parse().map_err(|_| err("per_round must be an integer"))?;
                }
                other => return Err(err(&format!("unknown rule kind `{other}`"))),
            }
        }
        Ok(g)
    }

    pub fn shipped() -> Self {
        Self::parse(BASE_GRAMMAR).expect("shipped grammar is well-formed")
    }

    pub fn is_empty(&self) -> bool {
        self.synonyms.is_empty() && self.reorderings.is_empty()
    }

    /// All single-rule rewrites of `tokens` (lower-cased).
    fn rewrites(&self, tokens: &[String]) -> Vec<Vec<String>> {
        let lower: Vec<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
        let mut out = Vec::new();
        for set in &self.synonyms {
            for phrase in set {
                let n = phrase.len();
                if n > lower.len() {
                    continue;
                }
                for start in 0..=lower.len() - n {
                    if lower[start..start + n] != phrase[..] {
                        continue;
                    }
                    for alt in set.iter().filter(|a| *a != phrase) {
                        let mut v = lower[..start].to_vec();
                        v.extend(alt.iter().cloned());
                        v.extend(lower[start + n..].iter().cloned());
                        out.push(v);
                    }
                }
            }
        }
        for rule in &self.reorderings {
            if let Some(v) = rule.apply(&lower) {
                out.push(v);
            }
        }
        out
    }
}

impl Reordering {
    fn apply(&self, tokens: &[String]) -> Option<Vec<String>> {
        let star = self.pattern.iter().position(|t| t == "*");
        let captured: Vec<String> = match star {
            None => {
                if tokens != &self.pattern[..] {
                    return None;
                }
                Vec::new()
            }
            Some(s) => {
                let (pre, post) = (&self.pattern[..s], &self.pattern[s + 1..]);
                if tokens.len() < pre.len() + post.len() + 1
                    || tokens[..pre.len()] != *pre
                    || tokens[tokens.len() - post.len()..] != *post
                {
                    return None;
                }
                tokens[pre.len()..tokens.len() - post.len()].to_vec()
            }
        };
        let mut out = Vec::new();
        for t in &self.replacement {
            if t == "*" {
                out.extend(captured.iter().cloned());
            } else {
                out.push(t.clone());
            }
        }
        Some(out)
    }
}

fn capitalize(mut tokens: Vec<String>) -> Vec<String> {
    if let Some(first) = tokens.first_mut() {
        if first != SLOT {
            let mut c = first.chars();
            if let Some(h) = c.next() {
                *first = h.to_uppercase().collect::<String>() + c.as_str();
            }
        }
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expansion {
    pub templates: Vec<CommandTemplate>,
    /// Rewrites dropped because they did not keep exactly one slot.
    pub rejected: usize,
}

/// Grow the template set by `rounds` rounds of paraphrasing. Each round
/// collects every single-rule rewrite of the current set and keeps up to
/// `per_round` unseen ones, chosen by a fixed per-round shuffle.
pub fn expand_templates(base: &[CommandTemplate], grammar: &ParaphraseGrammar, rounds: usize) -> Expansion {
    let mut templates: Vec<CommandTemplate> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for t in base {
        if seen.insert(t.key()) {
            templates.push(t.clone());
        }
    }
    let mut rejected = 0;
    if grammar.is_empty() {
        return Expansion { templates, rejected };
    }
    for round in 0..rounds {
        let mut fresh: Vec<CommandTemplate> = Vec::new();
        let mut fresh_keys: HashSet<String> = HashSet::new();
        for t in &templates {
            for rw in grammar.rewrites(t.tokens()) {
                if rw.len() > 14 || rw.windows(2).any(|w| w[0] == w[1]) {
                    continue;
                }
                match CommandTemplate::new(capitalize(rw)) {
                    Ok(c) => {
                        let k = c.key();
                        if !seen.contains(&k) && fresh_keys.insert(k) {
                            fresh.push(c);
                        }
                    }
                    Err(_) => rejected += 1,
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x7e3a_1000 + round as u64);
        fresh.shuffle(&mut rng);
        for c in fresh.into_iter().take(grammar.per_round) {
            seen.insert(c.key());
            templates.push(c);
        }
    }
    if rejected > 0 {
        log::warn!("template expansion rejected {rejected} rewrites with a bad slot count");
    }
    Expansion { templates, rejected }
}

/// Replace the slot with the category's surface words.
pub fn instantiate_command(template: &CommandTemplate, category: usize) -> Result<Vec<String>, CommandError> {
    let cat = registry().get(category).ok_or(CommandError::UnknownCategory(category))?;
    let mut out = Vec::with_capacity(template.tokens.len() + 1);
    for t in &template.tokens {
        if t == SLOT {
            out.extend(cat.words.split_whitespace().map(str::to_string));
        } else {
            out.push(t.clone());
        }
    }
    Ok(out)
}

/// Lower-case and strip everything but letters, digits and apostrophes.
pub fn normalize_word(w: &str) -> String {
    w.chars()
        .filter(|c| c.is_alphanumeric() || *c == '\'')
        .flat_map(char::to_lowercase)
        .collect()
}

/// Word → index table. Index 0 is always `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from a word list; `<unk>` is placed first and duplicates dropped.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut set = BTreeSet::new();
        for w in words {
            let n = normalize_word(&w);
            if !n.is_empty() && n != UNK {
                set.insert(n);
            }
        }
        let words: Vec<String> = std::iter::once(UNK.to_string()).chain(set).collect();
        Self::with_words(words)
    }

    fn with_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    /// Every template word plus every registry category word.
    pub fn build(templates: &[CommandTemplate]) -> Self {
        let tpl = templates.iter().flat_map(|t| t.tokens().iter().filter(|w| *w != SLOT).cloned());
        let cats = registry().iter().flat_map(|c| c.words.split_whitespace().map(str::to_string));
        Self::from_words(tpl.chain(cats).collect::<Vec<_>>())
    }

    /// One word per line; line number is the index and line 0 is `<unk>`.
    pub fn parse(text: &str) -> Result<Self, CommandError> {
        let words: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        let words: Vec<String> = match words.last() {
            Some(l) if l.is_empty() => words[..words.len() - 1].to_vec(),
            _ => words,
        };
        if words.first().map(String::as_str) != Some(UNK) {
            return Err(CommandError::Vocabulary(format!("line 0 must be {UNK}")));
        }
        let mut seen = HashSet::new();
        for w in &words {
            if w.is_empty() || !seen.insert(w.clone()) {
                return Err(CommandError::Vocabulary(format!("empty or duplicate word {w:?}")));
            }
        }
        Ok(Self::with_words(words))
    }

    pub fn to_text(&self) -> String {
        self.words.iter().map(|w| format!("{w}\n")).collect()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn unk(&self) -> usize {
        0
    }

    pub fn word(&self, i: usize) -> Option<&str> {
        self.words.get(i).map(String::as_str)
    }

    pub fn get(&self, w: &str) -> Option<usize> {
        self.index.get(w).copied()
    }

    /// Rebuild the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }
}

/// Case-folded lookup; unknown words map to `<unk>`.
pub fn tokenize<S: AsRef<str>>(words: &[S], vocab: &Vocabulary) -> Result<Vec<usize>, CommandError> {
    if words.is_empty() {
        return Err(CommandError::EmptyCommand);
    }
    Ok(words
        .iter()
        .map(|w| vocab.get(&normalize_word(w.as_ref())).unwrap_or(vocab.unk()))
        .collect())
}

/// A grasp together with its training label for one command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspLabel {
    pub grasp: Grasp5D,
    pub class: OrientationClass,
    /// Index of the owning object within the scene.
    pub object: usize,
}

/// One (image, command, labelled grasps) tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Index of the scene within its dataset.
    pub scene: usize,
    pub words: Vec<String>,
    pub command: Vec<usize>,
    /// `None` for commands naming an object absent from the scene.
    pub target: Option<usize>,
    pub labels: Vec<GraspLabel>,
}

impl Sample {
    pub fn has_target(&self) -> bool {
        self.target.is_some()
    }

    pub fn target_grasps(&self) -> Vec<Grasp5D> {
        self.labels
            .iter()
            .filter(|l| l.class.is_orientation())
            .map(|l| l.grasp)
            .collect()
    }
}

/// Label every grasp of `scene` for a command naming `target`.
pub fn label_grasps(scene: &Scene, target: Option<usize>, n_orient: usize) -> Vec<GraspLabel> {
    scene
        .all_grasps()
        .map(|(obj, g)| {
            let is_target = target == Some(scene.objects[obj].category);
            GraspLabel {
                grasp: *g,
                class: if is_target {
                    OrientationClass::Orientation(theta_to_class(g.theta(), n_orient))
                } else {
                    OrientationClass::NotTarget
                },
                object: obj,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SampleStats {
    pub have_target: usize,
    pub no_target: usize,
    /// No-target requests dropped because every category was present.
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SampleOptions {
    pub no_target_ratio: f64,
    pub n_orient: usize,
    /// Size of the category pool no-target commands are drawn from.
    pub categories: usize,
    pub seed: u64,
}

/// One have-target sample per object, plus no-target samples naming an
/// absent category so that they make up `no_target_ratio` of the result.
pub fn build_samples(
    scenes: &[Scene],
    templates: &[CommandTemplate],
    vocab: &Vocabulary,
    opts: &SampleOptions,
) -> Result<(Vec<Sample>, SampleStats), CommandError> {
    if !(0.0..1.0).contains(&opts.no_target_ratio) {
        return Err(CommandError::Ratio(opts.no_target_ratio));
    }
    if templates.is_empty() {
        return Err(CommandError::SlotCount("no templates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut per_scene: Vec<Vec<Sample>> = vec![Vec::new(); scenes.len()];
    let mut stats = SampleStats::default();

    let make = |scene_idx: usize, target: Option<usize>, category: usize, rng: &mut ChaCha8Rng| -> Result<Sample, CommandError> {
        let tpl = &templates[rng.random_range(0..templates.len())];
        let words = instantiate_command(tpl, category)?;
        let command = tokenize(&words, vocab)?;
        Ok(Sample {
            scene: scene_idx,
            words,
            command,
            target,
            labels: label_grasps(&scenes[scene_idx], target, opts.n_orient),
        })
    };

    for (si, scene) in scenes.iter().enumerate() {
        for obj in &scene.objects {
            per_scene[si].push(make(si, Some(obj.category), obj.category, &mut rng)?);
            stats.have_target += 1;
        }
    }

    let r = opts.no_target_ratio;
    let wanted = (r / (1.0 - r) * stats.have_target as f64).round() as usize;
    let absent: Vec<Vec<usize>> = scenes
        .iter()
        .map(|s| {
            (0..opts.categories)
                .filter(|c| !s.objects.iter().any(|o| o.category == *c))
                .collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..scenes.len()).filter(|&i| !absent[i].is_empty()).collect();
    stats.skipped = scenes.len() - order.len();
    if stats.skipped > 0 {
        log::warn!("{} scenes contain every category and get no no-target command", stats.skipped);
    }
    order.shuffle(&mut rng);
    if !order.is_empty() {
        for k in 0..wanted {
            let si = order[k % order.len()];
            let cat = absent[si][rng.random_range(0..absent[si].len())];
            per_scene[si].push(make(si, None, cat, &mut rng)?);
            stats.no_target += 1;
        }
    } else if wanted > 0 {
        stats.skipped += wanted;
    }
    Ok((per_scene.into_iter().flatten().collect(), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};

    fn tpl(s: &str) -> CommandTemplate {
        CommandTemplate::parse(s).unwrap()
    }

    #[test]
    fn shipped_assets_parse() {
        let base = base_templates();
        assert_eq!(base.len(), 18);
        let g = ParaphraseGrammar::shipped();
        assert!(!g.is_empty());
    }

    #[test]
    fn template_slot_count_is_enforced() {
        assert!(CommandTemplate::parse("Pass me the banana").is_err());
        assert!(CommandTemplate::parse("<obj> and <obj>").is_err());
        assert!(CommandTemplate::parse("Pass me the ⟨obj⟩").is_ok());
    }

    #[test]
    fn expansion_hits_target_band() {
        let out = expand_templates(&base_templates(), &ParaphraseGrammar::shipped(), 10);
        let n = out.templates.len();
        assert!((100..=150).contains(&n), "got {n} templates");
        let keys: HashSet<String> = out.templates.iter().map(|t| t.key()).collect();
        assert_eq!(keys.len(), n);
        for t in &out.templates {
            assert_eq!(t.tokens().iter().filter(|w| *w == SLOT).count(), 1);
        }
    }

    #[test]
    fn empty_grammar_is_identity() {
        let base = base_templates();
        let out = expand_templates(&base, &ParaphraseGrammar::default(), 10);
        assert_eq!(out.templates, base);
        assert_eq!(out.rejected, 0);
    }

    #[test]
    fn bad_rules_are_rejected_and_counted() {
        let g = ParaphraseGrammar::parse("perm: * => * <obj>\nperm: * <obj> => *\n").unwrap();
        let out = expand_templates(&[tpl("Pass me the <obj>")], &g, 3);
        assert_eq!(out.templates.len(), 1);
        assert!(out.rejected >= 2);
    }

    #[test]
    fn grammar_parse_errors() {
        assert!(ParaphraseGrammar::parse("syn: one").is_err());
        assert!(ParaphraseGrammar::parse("bogus: a | b").is_err());
        assert!(ParaphraseGrammar::parse("perm: * a * => b").is_err());
    }

    #[test]
    fn instantiate_examples() {
        // registry: 1 = banana, 3 = tape, 2 = wrist developer
        assert_eq!(instantiate_command(&tpl("Pass me the <obj>"), 1).unwrap().join(" "), "Pass me the banana");
        assert_eq!(instantiate_command(&tpl("Fetch that <obj> for me"), 3).unwrap().join(" "), "Fetch that tape for me");
        assert_eq!(instantiate_command(&tpl("Get the <obj>"), 2).unwrap().join(" "), "Get the wrist developer");
        assert!(instantiate_command(&tpl("Get the <obj>"), 99).is_err());
    }

    #[test]
    fn tokenize_behaviour() {
        let vocab = Vocabulary::build(&base_templates());
        let known = tokenize(&["Pass", "me", "the", "banana"], &vocab).unwrap();
        assert!(known.iter().all(|&i| i != vocab.unk()));
        let unk = tokenize(&["zxqv", "the", "banana"], &vocab).unwrap();
        assert_eq!(unk[0], vocab.unk());
        assert_eq!(unk.len(), 3);
        assert_eq!(unk, tokenize(&["zxqv", "the", "banana"], &vocab).unwrap());
        assert_eq!(tokenize(&["BANANA!"], &vocab).unwrap(), tokenize(&["banana"], &vocab).unwrap());
        assert!(matches!(tokenize::<&str>(&[], &vocab), Err(CommandError::EmptyCommand)));
    }

    #[test]
    fn category_words_are_in_vocabulary() {
        let templates = expand_templates(&base_templates(), &ParaphraseGrammar::shipped(), 10).templates;
        let vocab = Vocabulary::build(&templates);
        for t in &templates {
            for c in 0..registry().len() {
                let words = instantiate_command(t, c).unwrap();
                let ids = tokenize(&words, &vocab).unwrap();
                assert!(ids.iter().all(|&i| i != vocab.unk()), "{words:?}");
            }
        }
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let vocab = Vocabulary::build(&base_templates());
        let text = vocab.to_text();
        assert!(text.starts_with("<unk>\n"));
        assert_eq!(Vocabulary::parse(&text).unwrap(), vocab);
        assert!(Vocabulary::parse("hello\n<unk>\n").is_err());
        assert!(Vocabulary::parse("<unk>\na\na\n").is_err());
    }

    fn scenes(n: u64) -> Vec<Scene> {
        let cfg = SceneConfig::default();
        (0..n).map(|s| generate_scene(&cfg, s).unwrap()).collect()
    }

    #[test]
    fn samples_follow_labelling_rules() {
        let scenes = scenes(12);
        let templates = base_templates();
        let vocab = Vocabulary::build(&templates);
        let opts = SampleOptions { no_target_ratio: 0.254, n_orient: 19, categories: 8, seed: 3 };
        let (samples, stats) = build_samples(&scenes, &templates, &vocab, &opts).unwrap();
        assert_eq!(stats.have_target, scenes.iter().map(|s| s.objects.len()).sum::<usize>());
        assert_eq!(samples.len(), stats.have_target + stats.no_target);
        for s in &samples {
            let scene = &scenes[s.scene];
            match s.target {
                None => assert!(s.labels.iter().all(|l| l.class == OrientationClass::NotTarget)),
                Some(cat) => {
                    assert!(s.labels.iter().any(|l| l.class.is_orientation()));
                    for l in &s.labels {
                        let obj_cat = scene.objects[l.object].category;
                        if obj_cat == cat {
                            let want = theta_to_class(l.grasp.theta(), 19);
                            assert_eq!(l.class, OrientationClass::Orientation(want));
                        } else {
                            assert_eq!(l.class, OrientationClass::NotTarget);
                        }
                    }
                }
            }
            if let Some(cat) = s.target {
                assert!(scene.objects.iter().any(|o| o.category == cat));
            } else {
                let named = s.words.join(" ");
                for o in &scene.objects {
                    assert!(!named.contains(registry()[o.category].words));
                }
            }
        }
        let again = build_samples(&scenes, &templates, &vocab, &opts).unwrap().0;
        assert_eq!(again, samples);
    }

    #[test]
    fn no_target_fraction_tracks_ratio() {
        let scenes = scenes(60);
        let templates = base_templates();
        let vocab = Vocabulary::build(&templates);
        let opts = SampleOptions { no_target_ratio: 0.254, n_orient: 19, categories: 8, seed: 1 };
        let (_, stats) = build_samples(&scenes, &templates, &vocab, &opts).unwrap();
        let frac = stats.no_target as f64 / (stats.no_target + stats.have_target) as f64;
        assert!((frac - 0.254).abs() < 0.01, "{frac}");
        let zero = SampleOptions { no_target_ratio: 0.0, ..opts };
        assert_eq!(build_samples(&scenes, &templates, &vocab, &zero).unwrap().1.no_target, 0);
        let bad = SampleOptions { no_target_ratio: 1.0, ..opts };
        assert!(build_samples(&scenes, &templates, &vocab, &bad).is_err());
    }
}
