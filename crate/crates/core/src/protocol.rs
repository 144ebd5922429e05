//! Control-token grammar, controller output splitting and modality selection.
//!
//! A control token is a bracketed instruction of the form `[S.<name>]` where
//! `<name>` is `[a-z0-9_]+`. Three names are fixed (`stop`, `listen`,
//! `speak`) and the `need_<modality>` family routes work to expert backends.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, OnceLock};

use indexmap::IndexMap;
use parking_lot::RwLock;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STOP: &str = "[S.stop]";
pub const LISTEN: &str = "[S.listen]";
pub const SPEAK: &str = "[S.speak]";
/// Display form of the open `need_*` family in registries and prompts.
pub const NEED_FAMILY: &str = "[S.need_*]";

const NEED_PREFIX: &str = "need_";

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[S\.([a-z0-9_]+)\]").expect("static regex"))
}

fn modality_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[a-z0-9_]+$").expect("static regex"))
}

/// Returns true when `name` is a valid modality identifier.
pub fn is_valid_modality(name: &str) -> bool {
    modality_regex().is_match(name)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("token `{0}` is already registered")]
    DuplicateToken(String),
    #[error("malformed control token `{token}`: {reason}")]
    MalformedToken { token: String, reason: String },
    #[error("token `{0}` is a builtin and cannot be overridden")]
    BuiltinOverride(String),
    #[error("modality `{0}` is not registered")]
    UnknownModality(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Stop,
    Listen,
    Speak,
    Need,
}

/// A parsed `[S.*]` instruction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ControlToken {
    pub kind: TokenKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<String>,
    pub raw: String,
}

impl ControlToken {
    pub fn stop() -> Self {
        Self::builtin(TokenKind::Stop, STOP)
    }

    pub fn listen() -> Self {
        Self::builtin(TokenKind::Listen, LISTEN)
    }

    pub fn speak() -> Self {
        Self::builtin(TokenKind::Speak, SPEAK)
    }

    /// Panics if `modality` is not a valid identifier.
    pub fn need(modality: &str) -> Self {
        assert!(is_valid_modality(modality), "invalid modality `{modality}`");
        Self {
            kind: TokenKind::Need,
            modality: Some(modality.to_string()),
            raw: format!("[S.{NEED_PREFIX}{modality}]"),
        }
    }

    fn builtin(kind: TokenKind, raw: &str) -> Self {
        Self { kind, modality: None, raw: raw.to_string() }
    }

    /// Parses the bracket-free name of a token (`stop`, `need_vision`, ...).
    /// Returns `None` for names outside the fixed grammar.
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "stop" => Some(Self::stop()),
            "listen" => Some(Self::listen()),
            "speak" => Some(Self::speak()),
            _ => {
                let modality = name.strip_prefix(NEED_PREFIX)?;
                is_valid_modality(modality).then(|| Self::need(modality))
            }
        }
    }

    /// Parses a full raw token such as `[S.need_audio]`.
    pub fn parse(raw: &str) -> Result<Self, ProtocolError> {
        let malformed = |reason: &str| ProtocolError::MalformedToken {
            token: raw.to_string(),
            reason: reason.to_string(),
        };
        let caps = token_regex().captures(raw).ok_or_else(|| malformed("expected `[S.<name>]`"))?;
        let whole = caps.get(0).expect("group 0");
        if whole.start() != 0 || whole.end() != raw.len() {
            return Err(malformed("expected `[S.<name>]`"));
        }
        Self::from_name(&caps[1])
            .ok_or_else(|| malformed("name must be stop, listen, speak or need_<modality>"))
    }

    pub fn is_need(&self) -> bool {
        self.kind == TokenKind::Need
    }
}

impl fmt::Display for ControlToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<String>,
    pub builtin: bool,
}

/// Runtime table of the control tokens the controller may emit.
///
/// Entries keep registration order, which also fixes the order in which
/// modalities are fanned out and fused.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRegistry {
    entries: IndexMap<String, RegistryEntry>,
}

impl Default for InstructionRegistry {
    fn default() -> Self {
        let mut registry = Self::builtins_only();
        registry.insert_need("vision", "Use for visual queries about images, scenes or objects.");
        registry.insert_need("reasoning", "Use for analytical tasks that need logical inference.");
        registry
    }
}

impl InstructionRegistry {
    /// The fixed alphabet without any `need_*` modality registered.
    pub fn builtins_only() -> Self {
        let mut entries = IndexMap::new();
        let builtin = |description: &str| RegistryEntry {
            description: description.to_string(),
            modality: None,
            builtin: true,
        };
        entries.insert(
            STOP.to_string(),
            builtin("Output when the user intends to interrupt the current response."),
        );
        entries.insert(
            LISTEN.to_string(),
            builtin("Output when the user input is incomplete or needs clarification."),
        );
        entries.insert(SPEAK.to_string(), builtin("Output when a spoken response is needed."));
        entries.insert(
            NEED_FAMILY.to_string(),
            builtin("Extensible pattern: [S.need_<modality>] requests a registered expert."),
        );
        Self { entries }
    }

    fn insert_need(&mut self, modality: &str, description: &str) {
        self.entries.insert(
            ControlToken::need(modality).raw,
            RegistryEntry {
                description: description.to_string(),
                modality: Some(modality.to_string()),
                builtin: false,
            },
        );
    }

    /// Adds a `[S.need_<modality>]` token. `modality`, when given, must match
    /// the token's suffix.
    pub fn register_instruction(
        &mut self,
        raw: &str,
        description: &str,
        modality: Option<&str>,
    ) -> Result<(), ProtocolError> {
        if self.entries.get(raw).is_some_and(|e| e.builtin) || raw == NEED_FAMILY {
            return Err(ProtocolError::BuiltinOverride(raw.to_string()));
        }
        let token = ControlToken::parse(raw)?;
        let Some(token_modality) = token.modality.clone() else {
            return Err(ProtocolError::BuiltinOverride(raw.to_string()));
        };
        if let Some(m) = modality {
            if m != token_modality {
                return Err(ProtocolError::MalformedToken {
                    token: raw.to_string(),
                    reason: format!("modality `{m}` does not match token suffix `{token_modality}`"),
                });
            }
        }
        if self.entries.contains_key(raw) {
            return Err(ProtocolError::DuplicateToken(raw.to_string()));
        }
        self.insert_need(&token_modality, description);
        Ok(())
    }

    /// Builtins are refused; unknown tokens are a no-op returning false.
    pub fn unregister(&mut self, raw: &str) -> Result<bool, ProtocolError> {
        match self.entries.get(raw) {
            Some(entry) if entry.builtin => Err(ProtocolError::BuiltinOverride(raw.to_string())),
            Some(_) => Ok(self.entries.shift_remove(raw).is_some()),
            None => Ok(false),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &RegistryEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, raw: &str) -> Option<&RegistryEntry> {
        self.entries.get(raw)
    }

    pub fn has_modality(&self, modality: &str) -> bool {
        self.entries.contains_key(&ControlToken::need(modality).raw)
    }

    /// Registered modalities in registration order.
    pub fn modalities(&self) -> Vec<String> {
        self.entries.values().filter_map(|e| e.modality.clone()).collect()
    }

    fn modality_rank(&self, modality: &str) -> usize {
        self.entries
            .values()
            .position(|e| e.modality.as_deref() == Some(modality))
            .unwrap_or(usize::MAX)
    }

    /// Sorts modality names into registration order; unknown names go last
    /// in lexicographic order.
    pub fn sort_by_registration<T, F>(&self, items: &mut [T], key: F)
    where
        F: Fn(&T) -> &str,
    {
        items.sort_by(|a, b| {
            let (ka, kb) = (key(a), key(b));
            self.modality_rank(ka).cmp(&self.modality_rank(kb)).then_with(|| ka.cmp(kb))
        });
    }

    /// Whether `split_tokens` treats this token name as a control token.
    fn recognizes(&self, name: &str) -> bool {
        // The need_* family is builtin; unregistered modalities are caught
        // later by `select_modalities`.
        ControlToken::from_name(name).is_some()
    }
}

/// Registry shared by sessions: concurrent reads, serialized writes. Turns
/// work on an immutable snapshot.
#[derive(Debug, Clone, Default)]
pub struct SharedRegistry(Arc<RwLock<InstructionRegistry>>);

impl SharedRegistry {
    pub fn new(registry: InstructionRegistry) -> Self {
        Self(Arc::new(RwLock::new(registry)))
    }

    pub fn snapshot(&self) -> Arc<InstructionRegistry> {
        Arc::new(self.0.read().clone())
    }

    pub fn update<R>(&self, f: impl FnOnce(&mut InstructionRegistry) -> R) -> R {
        f(&mut self.0.write())
    }
}

/// One occurrence of a recognized control token in the source text.
///
/// `spans` are byte ranges in the source. A token is contiguous except when
/// it only formed after an inner token was removed (`[S.[S.stop]stop]`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenOccurrence {
    pub raw: String,
    pub spans: Vec<(usize, usize)>,
}

impl TokenOccurrence {
    pub fn start(&self) -> usize {
        self.spans.first().map(|s| s.0).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDiagnostics {
    /// `[S.xxx]` substrings outside the grammar, left in content.
    pub unknown_tokens: Vec<String>,
    /// Tokens seen more than once, with their total count.
    pub duplicates: BTreeMap<String, usize>,
    /// Set when a control token follows non-whitespace content.
    pub non_prefix_controls: bool,
}

/// The controller output split into content and controls.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerOutput {
    pub content: String,
    pub controls: Vec<ControlToken>,
    pub raw: String,
    pub occurrences: Vec<TokenOccurrence>,
    pub diagnostics: SplitDiagnostics,
}

impl ControllerOutput {
    pub fn has(&self, kind: TokenKind) -> bool {
        self.controls.iter().any(|c| c.kind == kind)
    }

    /// Rebuilds the source text from content and every token occurrence.
    pub fn reassemble(&self) -> String {
        // Reassembly is by byte position: walk the source positions in order,
        // taking bytes from a token span or the next content byte.
        let mut token_bytes: Vec<(usize, u8)> = Vec::new();
        for occ in &self.occurrences {
            let mut raw_iter = occ.raw.bytes();
            for &(start, end) in &occ.spans {
                for pos in start..end {
                    token_bytes.push((pos, raw_iter.next().unwrap_or(b'?')));
                }
            }
        }
        token_bytes.sort_unstable_by_key(|(pos, _)| *pos);
        let total = self.content.len() + token_bytes.len();
        let mut out = Vec::with_capacity(total);
        let mut content = self.content.bytes();
        let mut tokens = token_bytes.into_iter().peekable();
        for pos in 0..total {
            match tokens.peek() {
                Some(&(p, b)) if p == pos => {
                    out.push(b);
                    tokens.next();
                }
                _ => out.push(content.next().unwrap_or(b'?')),
            }
        }
        String::from_utf8(out).unwrap_or_default()
    }

    /// True when all controls precede any non-whitespace content, the
    /// "control token + response content" layout controllers are asked for.
    pub fn is_prefix_conformant(&self) -> bool {
        !self.diagnostics.non_prefix_controls
    }
}

/// Splits controller text into content and control tokens.
///
/// Total: malformed brackets and unknown `[S.xxx]` names stay in content.
/// Removal repeats until the content holds no recognized token, so splitting
/// the content again never yields controls.
pub fn split_tokens(raw: &str, registry: &InstructionRegistry) -> ControllerOutput {
    let re = token_regex();
    // Source byte offset of every byte still in the content.
    let mut kept: Vec<usize> = (0..raw.len()).collect();
    let mut content = raw.to_string();
    let mut occurrences: Vec<TokenOccurrence> = Vec::new();

    loop {
        let matches: Vec<(usize, usize, String)> = re
            .captures_iter(&content)
            .filter(|c| registry.recognizes(&c[1]))
            .map(|c| {
                let m = c.get(0).expect("group 0");
                (m.start(), m.end(), m.as_str().to_string())
            })
            .collect();
        if matches.is_empty() {
            break;
        }
        let mut removed = vec![false; kept.len()];
        for (start, end, text) in matches {
            let mut spans: Vec<(usize, usize)> = Vec::new();
            for (i, flag) in removed.iter_mut().enumerate().take(end).skip(start) {
                *flag = true;
                let pos = kept[i];
                match spans.last_mut() {
                    Some(last) if last.1 == pos => last.1 = pos + 1,
                    _ => spans.push((pos, pos + 1)),
                }
            }
            occurrences.push(TokenOccurrence { raw: text, spans });
        }
        let mut next_kept = Vec::with_capacity(kept.len());
        let mut next_content = Vec::with_capacity(content.len());
        for (i, (&pos, byte)) in kept.iter().zip(content.bytes()).enumerate() {
            if !removed[i] {
                next_kept.push(pos);
                next_content.push(byte);
            }
        }
        kept = next_kept;
        // Tokens are ASCII, so dropping them keeps the bytes valid UTF-8.
        content = String::from_utf8(next_content).expect("removing ASCII tokens keeps UTF-8");
    }

    occurrences.sort_by_key(TokenOccurrence::start);

    let mut controls: Vec<ControlToken> = Vec::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for occ in &occurrences {
        let count = counts.entry(occ.raw.clone()).or_insert(0);
        *count += 1;
        if *count == 1 {
            controls.push(ControlToken::parse(&occ.raw).expect("recognized token parses"));
        }
    }
    let duplicates = counts.into_iter().filter(|(_, n)| *n > 1).collect();

    let unknown_tokens =
        re.find_iter(&content).map(|m| m.as_str().to_string()).collect::<Vec<_>>();

    // Prefix conformance: no non-whitespace content byte before the last
    // token's first byte.
    let non_prefix_controls = match occurrences.iter().map(TokenOccurrence::start).max() {
        Some(last_token) => kept
            .iter()
            .zip(content.bytes())
            .any(|(&pos, b)| pos < last_token && !b.is_ascii_whitespace()),
        None => false,
    };

    ControllerOutput {
        content,
        controls,
        raw: raw.to_string(),
        occurrences,
        diagnostics: SplitDiagnostics { unknown_tokens, duplicates, non_prefix_controls },
    }
}

/// Maps `need_*` controls to the modalities to invoke, in registration order.
///
/// Empty when no `need_*` token is present.
pub fn select_modalities(
    controls: &[ControlToken],
    registry: &InstructionRegistry,
) -> Result<Vec<String>, ProtocolError> {
    let mut selected: Vec<String> = Vec::new();
    for token in controls.iter().filter(|t| t.is_need()) {
        let modality = token.modality.as_deref().expect("need token carries a modality");
        if !registry.has_modality(modality) {
            return Err(ProtocolError::UnknownModality(modality.to_string()));
        }
        if !selected.iter().any(|m| m == modality) {
            selected.push(modality.to_string());
        }
    }
    registry.sort_by_registration(&mut selected, |m| m.as_str());
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg() -> InstructionRegistry {
        InstructionRegistry::default()
    }

    #[test]
    fn splits_vision_request_from_content() {
        let out = split_tokens("[S.need_vision] I can see several roses", &reg());
        assert_eq!(out.controls, vec![ControlToken::need("vision")]);
        assert_eq!(out.content, " I can see several roses");
        assert!(out.is_prefix_conformant());
    }

    #[test]
    fn empty_input() {
        let out = split_tokens("", &reg());
        assert!(out.controls.is_empty());
        assert_eq!(out.content, "");
        assert_eq!(out.reassemble(), "");
    }

    #[test]
    fn adjacent_stop_listen() {
        let out = split_tokens("[S.stop][S.listen]", &reg());
        assert_eq!(out.controls, vec![ControlToken::stop(), ControlToken::listen()]);
        assert_eq!(out.content, "");
    }

    #[test]
    fn unknown_tokens_stay_in_content() {
        let out = split_tokens("[S.dance] hi [S.speak]", &reg());
        assert_eq!(out.controls, vec![ControlToken::speak()]);
        assert_eq!(out.content, "[S.dance] hi ");
        assert_eq!(out.diagnostics.unknown_tokens, vec!["[S.dance]".to_string()]);
        assert!(!out.is_prefix_conformant());
    }

    #[test]
    fn malformed_brackets_are_content() {
        for text in ["[S.stop", "S.stop]", "[S.]", "[S.Stop]", "[s.stop]", "[S.need-x]"] {
            let out = split_tokens(text, &reg());
            assert!(out.controls.is_empty(), "{text}");
            assert_eq!(out.content, text);
        }
    }

    #[test]
    fn duplicates_collapse_with_counts() {
        let out = split_tokens("[S.speak]a[S.speak]b[S.speak]", &reg());
        assert_eq!(out.controls, vec![ControlToken::speak()]);
        assert_eq!(out.diagnostics.duplicates.get(SPEAK), Some(&3));
        assert_eq!(out.reassemble(), "[S.speak]a[S.speak]b[S.speak]");
    }

    #[test]
    fn nested_token_is_removed_to_fixpoint() {
        let raw = "x[S.[S.stop]listen]y";
        let out = split_tokens(raw, &reg());
        assert_eq!(out.content, "xy");
        assert_eq!(out.controls, vec![ControlToken::listen(), ControlToken::stop()]);
        assert_eq!(out.reassemble(), raw);
        assert!(split_tokens(&out.content, &reg()).controls.is_empty());
    }

    #[test]
    fn unicode_content_survives() {
        let raw = "héllo [S.speak] wörld ✓";
        let out = split_tokens(raw, &reg());
        assert_eq!(out.content, "héllo  wörld ✓");
        assert_eq!(out.reassemble(), raw);
    }

    #[test]
    fn selection_set_semantics() {
        let r = reg();
        let sel = select_modalities(
            &[ControlToken::need("reasoning"), ControlToken::need("vision")],
            &r,
        )
        .unwrap();
        assert_eq!(sel, vec!["vision", "reasoning"]);
        assert!(select_modalities(&[ControlToken::speak()], &r).unwrap().is_empty());
        let sel = select_modalities(
            &[ControlToken::need("vision"), ControlToken::need("vision"), ControlToken::speak()],
            &r,
        )
        .unwrap();
        assert_eq!(sel, vec!["vision"]);
    }

    #[test]
    fn selection_idempotent_over_builtin_pairs() {
        // Every 2-token multiset over the default alphabet.
        let r = reg();
        let alphabet = [
            ControlToken::stop(),
            ControlToken::listen(),
            ControlToken::speak(),
            ControlToken::need("vision"),
            ControlToken::need("reasoning"),
        ];
        for a in &alphabet {
            for b in &alphabet {
                let pair = select_modalities(&[a.clone(), b.clone()], &r).unwrap();
                let doubled =
                    select_modalities(&[a.clone(), b.clone(), a.clone(), b.clone()], &r).unwrap();
                assert_eq!(pair, doubled);
                let mut expected: Vec<String> =
                    [a, b].iter().filter_map(|t| t.modality.clone()).collect();
                expected.dedup();
                r.sort_by_registration(&mut expected, |m| m.as_str());
                expected.dedup();
                assert_eq!(pair, expected);
            }
        }
    }

    #[test]
    fn unknown_modality_rejected_at_selection() {
        let r = reg();
        let out = split_tokens("[S.need_smell] sniff", &r);
        assert_eq!(out.controls, vec![ControlToken::need("smell")]);
        assert_eq!(
            select_modalities(&out.controls, &r),
            Err(ProtocolError::UnknownModality("smell".into()))
        );
    }

    #[test]
    fn registration_rules() {
        let mut r = reg();
        r.register_instruction("[S.need_audio]", "Use for sounds.", Some("audio")).unwrap();
        assert!(r.has_modality("audio"));
        assert_eq!(
            select_modalities(&[ControlToken::need("audio")], &r).unwrap(),
            vec!["audio"]
        );
        assert_eq!(
            r.register_instruction("[S.need_audio]", "again", None),
            Err(ProtocolError::DuplicateToken("[S.need_audio]".into()))
        );
        assert_eq!(
            r.register_instruction("[S.stop]", "no", None),
            Err(ProtocolError::BuiltinOverride("[S.stop]".into()))
        );
        assert!(matches!(
            r.register_instruction("S.need_x", "no", None),
            Err(ProtocolError::MalformedToken { .. })
        ));
        assert!(matches!(
            r.register_instruction("[S.need_x]", "no", Some("y")),
            Err(ProtocolError::MalformedToken { .. })
        ));
        assert!(matches!(r.unregister(STOP), Err(ProtocolError::BuiltinOverride(_))));
        assert!(matches!(r.unregister(NEED_FAMILY), Err(ProtocolError::BuiltinOverride(_))));
        assert_eq!(r.unregister("[S.need_audio]"), Ok(true));
    }

    #[test]
    fn parse_rejects_trailing_garbage() {
        assert!(ControlToken::parse("[S.stop]x").is_err());
        assert!(ControlToken::parse(" [S.stop]").is_err());
        assert_eq!(ControlToken::parse("[S.need_a1_b]").unwrap().modality.as_deref(), Some("a1_b"));
    }
}
