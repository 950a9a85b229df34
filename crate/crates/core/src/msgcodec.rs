//! Signaling message schema, procedure templates, tokenization and the
//! dataset builders for both twin levels.
//!
//! Eleven message types travel over N1 (UE-AMF), N2 (RAN-AMF) and N4
//! (SMF-UPF). Each type has one legal interface/direction pair and an exact
//! set of information elements. A message is tokenized as
//!
//! ```text
//! <interface> <direction> <type> (<ie-key> <ie-value>)* <sep>
//! ```
//!
//! with IEs in key order. Timestamps are not encoded. Integer IE values are
//! reduced modulo the vocabulary's id pool, so the vocabulary is fixed by
//! the schema alone.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::netsim::{AdmissionAction, AdmissionState, ServiceRequest, SimConfig, SliceKind, Trajectory, SLICE_COUNT};

pub type TokenId = u16;

/// Integer IE values are tokenized modulo this pool.
pub const DEFAULT_ID_POOL: u16 = 64;
pub const DEFAULT_CONTEXT_LENGTH: usize = 256;
/// Longest encoding of any schema-valid message, separator included.
pub const MAX_MESSAGE_TOKENS: usize = 3 + 2 * 5 + 1;
pub const STATE_DIM: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("schema violation in {msg_type}: {reason}")]
    SchemaViolation { msg_type: MessageType, reason: String },
    #[error("no vocabulary entry for {0}")]
    UnknownKey(String),
    #[error("malformed token sequence at position {position}: {reason}")]
    MalformedSequence { position: usize, reason: String },
    #[error("trace parse error on line {line}: {reason}")]
    TraceParse { line: usize, reason: String },
}

fn malformed(position: usize, reason: impl Into<String>) -> CodecError {
    CodecError::MalformedSequence { position, reason: reason.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Interface {
    N1,
    N2,
    N4,
}

impl Interface {
    pub const ALL: [Interface; 3] = [Interface::N1, Interface::N2, Interface::N4];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// Sent by the UE, RAN or UPF towards the control plane.
    ToControlPlane,
    /// Emitted by the control plane.
    FromControlPlane,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::ToControlPlane, Direction::FromControlPlane];

    fn short(self) -> &'static str {
        match self {
            Direction::ToControlPlane => "ul",
            Direction::FromControlPlane => "dl",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageType {
    RegistrationRequest,
    RegistrationAccept,
    PduSessionEstablishmentRequest,
    N2ResourceSetupRequest,
    N2ResourceSetupResponse,
    N4SessionEstablishmentRequest,
    N4SessionEstablishmentResponse,
    PduSessionEstablishmentAccept,
    PduSessionEstablishmentReject,
    PduSessionReleaseRequest,
    PduSessionReleaseComplete,
}

impl MessageType {
    pub const ALL: [MessageType; 11] = [
        MessageType::RegistrationRequest,
        MessageType::RegistrationAccept,
        MessageType::PduSessionEstablishmentRequest,
        MessageType::N2ResourceSetupRequest,
        MessageType::N2ResourceSetupResponse,
        MessageType::N4SessionEstablishmentRequest,
        MessageType::N4SessionEstablishmentResponse,
        MessageType::PduSessionEstablishmentAccept,
        MessageType::PduSessionEstablishmentReject,
        MessageType::PduSessionReleaseRequest,
        MessageType::PduSessionReleaseComplete,
    ];

    /// The only legal interface and direction for this type.
    pub fn route(self) -> (Interface, Direction) {
        use Direction::*;
        use MessageType::*;
        match self {
            RegistrationRequest => (Interface::N1, ToControlPlane),
            RegistrationAccept => (Interface::N1, FromControlPlane),
            PduSessionEstablishmentRequest => (Interface::N1, ToControlPlane),
            N2ResourceSetupRequest => (Interface::N2, FromControlPlane),
            N2ResourceSetupResponse => (Interface::N2, ToControlPlane),
            N4SessionEstablishmentRequest => (Interface::N4, FromControlPlane),
            N4SessionEstablishmentResponse => (Interface::N4, ToControlPlane),
            PduSessionEstablishmentAccept => (Interface::N1, FromControlPlane),
            PduSessionEstablishmentReject => (Interface::N1, FromControlPlane),
            PduSessionReleaseRequest => (Interface::N1, ToControlPlane),
            PduSessionReleaseComplete => (Interface::N1, FromControlPlane),
        }
    }

    /// Mandatory IE keys in canonical order. No other IEs are allowed.
    pub fn mandatory_ies(self) -> &'static [IeKey] {
        use IeKey::*;
        use MessageType::*;
        match self {
            RegistrationRequest | RegistrationAccept => &[UeId, SliceId],
            PduSessionEstablishmentRequest => &[UeId, SessionId, SliceId, QosProfile],
            N4SessionEstablishmentRequest => &[UeId, SessionId, QosProfile],
            N2ResourceSetupRequest => &[UeId, SessionId, SliceId, ResourceGrant],
            PduSessionEstablishmentAccept => &[UeId, SessionId, SliceId, QosProfile, ResourceGrant],
            N4SessionEstablishmentResponse | N2ResourceSetupResponse | PduSessionReleaseRequest => &[UeId, SessionId],
            PduSessionEstablishmentReject | PduSessionReleaseComplete => &[UeId, SessionId, Cause],
        }
    }
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IeKey {
    UeId,
    SessionId,
    SliceId,
    QosProfile,
    Cause,
    ResourceGrant,
}

impl IeKey {
    pub const ALL: [IeKey; 6] = [
        IeKey::UeId,
        IeKey::SessionId,
        IeKey::SliceId,
        IeKey::QosProfile,
        IeKey::Cause,
        IeKey::ResourceGrant,
    ];

    fn accepts(self, value: &IeValue) -> bool {
        matches!(
            (self, value),
            (IeKey::UeId | IeKey::SessionId | IeKey::QosProfile | IeKey::ResourceGrant, IeValue::Int(_))
                | (IeKey::SliceId, IeValue::Slice(_))
                | (IeKey::Cause, IeValue::Cause(_))
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cause {
    InsufficientResources,
    NormalRelease,
}

impl Cause {
    pub const ALL: [Cause; 2] = [Cause::InsufficientResources, Cause::NormalRelease];

    fn short(self) -> &'static str {
        match self {
            Cause::InsufficientResources => "insufficient_resources",
            Cause::NormalRelease => "normal_release",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IeValue {
    Int(u16),
    Slice(SliceKind),
    Cause(Cause),
}

impl fmt::Display for IeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IeValue::Int(v) => write!(f, "{v}"),
            IeValue::Slice(s) => f.write_str(s.short_name()),
            IeValue::Cause(c) => f.write_str(c.short()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InformationElement {
    pub key: IeKey,
    pub value: IeValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalingMessage {
    pub timestamp: f64,
    pub interface: Interface,
    pub direction: Direction,
    pub msg_type: MessageType,
    pub ue_id: u64,
    /// Kept sorted by key.
    pub ies: Vec<InformationElement>,
}

impl SignalingMessage {
    /// Builds a message on its legal route with IEs sorted into canonical
    /// order.
    pub fn new(msg_type: MessageType, ue_id: u64, mut ies: Vec<InformationElement>) -> Self {
        let (interface, direction) = msg_type.route();
        ies.sort_by_key(|ie| ie.key);
        SignalingMessage { timestamp: 0.0, interface, direction, msg_type, ue_id, ies }
    }

    pub fn ie(&self, key: IeKey) -> Option<IeValue> {
        self.ies.iter().find(|ie| ie.key == key).map(|ie| ie.value)
    }

    pub fn is_control_plane(&self) -> bool {
        self.direction == Direction::FromControlPlane
    }

    /// Checks route, the exact IE key set, value kinds and the UeId/ue_id
    /// correspondence under the given id pool.
    pub fn validate(&self, id_pool: u16) -> Result<(), CodecError> {
        let violation = |reason: String| CodecError::SchemaViolation { msg_type: self.msg_type, reason };
        if (self.interface, self.direction) != self.msg_type.route() {
            return Err(violation(format!("illegal route {:?}/{:?}", self.interface, self.direction)));
        }
        let keys: Vec<IeKey> = self.ies.iter().map(|ie| ie.key).collect();
        let required = self.msg_type.mandatory_ies();
        for k in required {
            if !keys.contains(k) {
                return Err(violation(format!("missing mandatory IE {k:?}")));
            }
        }
        if keys.len() != required.len() {
            return Err(violation(format!("unexpected IE set {keys:?}")));
        }
        if keys.windows(2).any(|w| w[0] >= w[1]) {
            return Err(violation("IEs not in canonical key order".into()));
        }
        for ie in &self.ies {
            if !ie.key.accepts(&ie.value) {
                return Err(violation(format!("value {} not valid for {:?}", ie.value, ie.key)));
            }
            if let IeValue::Int(v) = ie.value {
                if v >= id_pool {
                    return Err(violation(format!("{:?} value {v} outside pool {id_pool}", ie.key)));
                }
            }
        }
        if let Some(IeValue::Int(ue)) = self.ie(IeKey::UeId) {
            if u64::from(ue) != self.ue_id % u64::from(id_pool) {
                return Err(violation(format!("UeId IE {ue} does not match ue_id {}", self.ue_id)));
            }
        }
        Ok(())
    }
}

/// Renders a message as one trace line:
/// `<timestamp> <interface> <direction> <type> <ue_id> [<key>=<value> ...]`.
impl fmt::Display for SignalingMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} {:?} {} {:?} {}",
            self.timestamp,
            self.interface,
            self.direction.short(),
            self.msg_type,
            self.ue_id
        )?;
        for ie in &self.ies {
            write!(f, " {:?}={}", ie.key, ie.value)?;
        }
        Ok(())
    }
}

impl FromStr for SignalingMessage {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, String> {
        let mut parts = line.split_whitespace();
        let mut next = |what: &str| parts.next().ok_or_else(|| format!("missing {what}"));
        let timestamp: f64 = next("timestamp")?.parse().map_err(|e| format!("timestamp: {e}"))?;
        let interface = match next("interface")? {
            "N1" => Interface::N1,
            "N2" => Interface::N2,
            "N4" => Interface::N4,
            other => return Err(format!("unknown interface {other:?}")),
        };
        let direction = match next("direction")? {
            "ul" => Direction::ToControlPlane,
            "dl" => Direction::FromControlPlane,
            other => return Err(format!("unknown direction {other:?}")),
        };
        let type_name = next("msg_type")?;
        let msg_type = MessageType::ALL
            .into_iter()
            .find(|t| format!("{t:?}") == type_name)
            .ok_or_else(|| format!("unknown message type {type_name:?}"))?;
        let ue_id: u64 = next("ue_id")?.parse().map_err(|e| format!("ue_id: {e}"))?;
        let mut ies = Vec::new();
        for pair in parts {
            let (k, v) = pair.split_once('=').ok_or_else(|| format!("malformed IE {pair:?}"))?;
            let key = IeKey::ALL
                .into_iter()
                .find(|key| format!("{key:?}") == k)
                .ok_or_else(|| format!("unknown IE key {k:?}"))?;
            let value = match key {
                IeKey::SliceId => IeValue::Slice(SliceKind::from_short_name(v).ok_or_else(|| format!("unknown slice {v:?}"))?),
                IeKey::Cause => IeValue::Cause(
                    Cause::ALL
                        .into_iter()
                        .find(|c| c.short() == v)
                        .ok_or_else(|| format!("unknown cause {v:?}"))?,
                ),
                _ => IeValue::Int(v.parse().map_err(|e| format!("{k}: {e}"))?),
            };
            ies.push(InformationElement { key, value });
        }
        Ok(SignalingMessage { timestamp, interface, direction, msg_type, ue_id, ies })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageTrace {
    pub messages: Vec<SignalingMessage>,
    pub config_digest: String,
}

impl MessageTrace {
    /// Hex SHA-256 of the rendered trace, used to keep training and
    /// held-out traces apart.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config_digest.as_bytes());
        for m in &self.messages {
            h.update(m.to_string().as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Line format: a `# config_digest=<hex>` header then one message per
    /// line as rendered by `Display for SignalingMessage`.
    pub fn to_text(&self) -> String {
        let mut out = format!("# config_digest={}\n", self.config_digest);
        for m in &self.messages {
            out.push_str(&m.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CodecError> {
        let mut config_digest = String::new();
        let mut messages = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(d) = rest.trim().strip_prefix("config_digest=") {
                    config_digest = d.to_string();
                }
                continue;
            }
            let msg = line
                .parse::<SignalingMessage>()
                .map_err(|reason| CodecError::TraceParse { line: i + 1, reason })?;
            messages.push(msg);
        }
        Ok(MessageTrace { messages, config_digest })
    }

    /// Messages belonging to one UE, in trace order.
    pub fn for_ue(&self, ue_id: u64) -> Vec<&SignalingMessage> {
        self.messages.iter().filter(|m| m.ue_id == ue_id).collect()
    }
}

/// Per-session identifiers chosen by the UE.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionParams {
    /// PDU session identity, 1..=15.
    pub session_id: u16,
    /// QoS profile index. Each slice uses two adjacent profiles.
    pub qos: u16,
}

impl SessionParams {
    pub fn draw(request: &ServiceRequest, rng: &mut ChaCha8Rng) -> Self {
        let session_id = rng.random_range(1..=15u16);
        let qos = 1 + 2 * request.kind.index() as u16 + rng.random_range(0..2u16);
        SessionParams { session_id, qos }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateKind {
    Accept,
    RejectTimeout,
}

/// Resource grant carried in N2 setup and session accept messages: the
/// request's total demand in resource units, clipped into the id pool.
pub fn resource_grant(request: &ServiceRequest, id_pool: u16) -> u16 {
    (request.demand.total().min(u32::from(id_pool) - 1)) as u16
}

/// The canonical message sequence for one request. The accept path has
/// eight establishment messages followed by the two release messages; the
/// reject path ends with a `PduSessionEstablishmentReject`.
pub fn procedure_template(kind: TemplateKind, request: &ServiceRequest, session: SessionParams) -> Vec<SignalingMessage> {
    procedure_template_with_pool(kind, request, session, DEFAULT_ID_POOL)
}

pub fn procedure_template_with_pool(
    kind: TemplateKind,
    request: &ServiceRequest,
    session: SessionParams,
    id_pool: u16,
) -> Vec<SignalingMessage> {
    use MessageType::*;
    let ue = request.request_id;
    let ue_ie = IeValue::Int((ue % u64::from(id_pool)) as u16);
    let ie = |key, value| InformationElement { key, value };
    let base = || vec![ie(IeKey::UeId, ue_ie), ie(IeKey::SessionId, IeValue::Int(session.session_id))];
    let with = |mut v: Vec<InformationElement>, extra: &[InformationElement]| {
        v.extend_from_slice(extra);
        v
    };
    let slice = ie(IeKey::SliceId, IeValue::Slice(request.kind));
    let qos = ie(IeKey::QosProfile, IeValue::Int(session.qos));
    let grant = ie(IeKey::ResourceGrant, IeValue::Int(resource_grant(request, id_pool)));

    let mut out = vec![
        SignalingMessage::new(RegistrationRequest, ue, vec![ie(IeKey::UeId, ue_ie), slice]),
        SignalingMessage::new(RegistrationAccept, ue, vec![ie(IeKey::UeId, ue_ie), slice]),
        SignalingMessage::new(PduSessionEstablishmentRequest, ue, with(base(), &[slice, qos])),
    ];
    match kind {
        TemplateKind::Accept => {
            out.push(SignalingMessage::new(N4SessionEstablishmentRequest, ue, with(base(), &[qos])));
            out.push(SignalingMessage::new(N4SessionEstablishmentResponse, ue, base()));
            out.push(SignalingMessage::new(N2ResourceSetupRequest, ue, with(base(), &[slice, grant])));
            out.push(SignalingMessage::new(N2ResourceSetupResponse, ue, base()));
            out.push(SignalingMessage::new(PduSessionEstablishmentAccept, ue, with(base(), &[slice, qos, grant])));
            out.push(SignalingMessage::new(PduSessionReleaseRequest, ue, base()));
            out.push(SignalingMessage::new(
                PduSessionReleaseComplete,
                ue,
                with(base(), &[ie(IeKey::Cause, IeValue::Cause(Cause::NormalRelease))]),
            ));
        }
        TemplateKind::RejectTimeout => {
            out.push(SignalingMessage::new(
                PduSessionEstablishmentReject,
                ue,
                with(base(), &[ie(IeKey::Cause, IeValue::Cause(Cause::InsufficientResources))]),
            ));
        }
    }
    out
}

/// Checks that `msgs` (one UE's messages in order) is a prefix of exactly
/// one procedure template, comparing message types only.
pub fn matches_template_prefix(msgs: &[&SignalingMessage]) -> bool {
    use MessageType::*;
    const ACCEPT: [MessageType; 10] = [
        RegistrationRequest,
        RegistrationAccept,
        PduSessionEstablishmentRequest,
        N4SessionEstablishmentRequest,
        N4SessionEstablishmentResponse,
        N2ResourceSetupRequest,
        N2ResourceSetupResponse,
        PduSessionEstablishmentAccept,
        PduSessionReleaseRequest,
        PduSessionReleaseComplete,
    ];
    const REJECT: [MessageType; 4] =
        [RegistrationRequest, RegistrationAccept, PduSessionEstablishmentRequest, PduSessionEstablishmentReject];
    let types: Vec<MessageType> = msgs.iter().map(|m| m.msg_type).collect();
    let is_prefix = |t: &[MessageType]| types.len() <= t.len() && t[..types.len()] == types[..];
    is_prefix(&ACCEPT) || is_prefix(&REJECT)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Pad,
    Bos,
    Eos,
    Sep,
    Interface(Interface),
    Direction(Direction),
    Type(MessageType),
    Key(IeKey),
    Int(u16),
    Slice(SliceKind),
    Cause(Cause),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Pad => f.write_str("<pad>"),
            Token::Bos => f.write_str("<bos>"),
            Token::Eos => f.write_str("<eos>"),
            Token::Sep => f.write_str("<sep>"),
            Token::Interface(i) => write!(f, "{i:?}"),
            Token::Direction(d) => f.write_str(d.short()),
            Token::Type(t) => write!(f, "{t:?}"),
            Token::Key(k) => write!(f, "{k:?}="),
            Token::Int(v) => write!(f, "#{v}"),
            Token::Slice(s) => write!(f, "slice:{s}"),
            Token::Cause(c) => write!(f, "cause:{}", c.short()),
        }
    }
}

/// Closed token vocabulary determined by the schema and the id pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    ids: HashMap<Token, TokenId>,
    names: HashMap<String, TokenId>,
    id_pool: u16,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new(DEFAULT_ID_POOL)
    }
}

impl Vocabulary {
    pub fn new(id_pool: u16) -> Self {
        assert!(id_pool >= 16, "id pool must hold session ids and QoS indices");
        let mut tokens = vec![Token::Pad, Token::Bos, Token::Eos, Token::Sep];
        tokens.extend(Interface::ALL.map(Token::Interface));
        tokens.extend(Direction::ALL.map(Token::Direction));
        tokens.extend(MessageType::ALL.map(Token::Type));
        tokens.extend(IeKey::ALL.map(Token::Key));
        tokens.extend((0..id_pool).map(Token::Int));
        tokens.extend(SliceKind::ALL.map(Token::Slice));
        tokens.extend(Cause::ALL.map(Token::Cause));
        let ids = tokens.iter().enumerate().map(|(i, t)| (*t, i as TokenId)).collect();
        let names = tokens.iter().enumerate().map(|(i, t)| (t.to_string(), i as TokenId)).collect();
        Vocabulary { tokens, ids, names, id_pool }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_pool(&self) -> u16 {
        self.id_pool
    }

    pub fn id(&self, token: Token) -> Option<TokenId> {
        self.ids.get(&token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<Token> {
        self.tokens.get(id as usize).copied()
    }

    pub fn id_by_name(&self, name: &str) -> Option<TokenId> {
        self.names.get(name).copied()
    }

    pub fn name(&self, id: TokenId) -> Option<String> {
        self.token(id).map(|t| t.to_string())
    }

    pub fn pad(&self) -> TokenId {
        0
    }
    pub fn bos(&self) -> TokenId {
        1
    }
    pub fn eos(&self) -> TokenId {
        2
    }
    pub fn sep(&self) -> TokenId {
        3
    }

    fn require(&self, token: Token) -> Result<TokenId, CodecError> {
        self.id(token).ok_or_else(|| CodecError::UnknownKey(token.to_string()))
    }

    /// `true` if `id` is the direction token for control-plane messages.
    pub fn is_control_plane_direction(&self, id: TokenId) -> bool {
        self.token(id) == Some(Token::Direction(Direction::FromControlPlane))
    }
}

/// Tokenizes a message in canonical order. The message must be
/// schema-valid; use [`SignalingMessage::validate`] first when in doubt.
pub fn encode_message(msg: &SignalingMessage, vocab: &Vocabulary) -> Result<Vec<TokenId>, CodecError> {
    msg.validate(vocab.id_pool())?;
    let mut out = Vec::with_capacity(4 + 2 * msg.ies.len());
    out.push(vocab.require(Token::Interface(msg.interface))?);
    out.push(vocab.require(Token::Direction(msg.direction))?);
    out.push(vocab.require(Token::Type(msg.msg_type))?);
    for ie in &msg.ies {
        out.push(vocab.require(Token::Key(ie.key))?);
        let value = match ie.value {
            IeValue::Int(v) => Token::Int(v),
            IeValue::Slice(s) => Token::Slice(s),
            IeValue::Cause(c) => Token::Cause(c),
        };
        out.push(vocab.require(value)?);
    }
    out.push(vocab.sep());
    Ok(out)
}

/// Strict inverse of [`encode_message`]. The sequence must be exactly one
/// canonical encoding, separator included. The result has timestamp zero
/// and `ue_id` equal to the UeId IE.
pub fn decode_message(tokens: &[TokenId], vocab: &Vocabulary) -> Result<SignalingMessage, CodecError> {
    if tokens.is_empty() {
        return Err(malformed(0, "empty sequence"));
    }
    let tok = |pos: usize| -> Result<Token, CodecError> {
        let id = *tokens.get(pos).ok_or_else(|| malformed(pos, "truncated"))?;
        vocab.token(id).ok_or_else(|| malformed(pos, format!("unknown token id {id}")))
    };
    let Token::Interface(interface) = tok(0)? else {
        return Err(malformed(0, "expected interface"));
    };
    let Token::Direction(direction) = tok(1)? else {
        return Err(malformed(1, "expected direction"));
    };
    let Token::Type(msg_type) = tok(2)? else {
        return Err(malformed(2, "expected message type"));
    };
    let mut pos = 3;
    let mut ies: Vec<InformationElement> = Vec::new();
    loop {
        match tok(pos)? {
            Token::Sep => {
                if pos + 1 != tokens.len() {
                    return Err(malformed(pos + 1, "trailing tokens after separator"));
                }
                break;
            }
            Token::Key(key) => {
                if ies.last().is_some_and(|last| last.key >= key) {
                    return Err(malformed(pos, "IE keys out of canonical order"));
                }
                let value = match tok(pos + 1)? {
                    Token::Int(v) => IeValue::Int(v),
                    Token::Slice(s) => IeValue::Slice(s),
                    Token::Cause(c) => IeValue::Cause(c),
                    _ => return Err(malformed(pos + 1, "expected IE value")),
                };
                if !key.accepts(&value) {
                    return Err(malformed(pos + 1, format!("value kind does not match {key:?}")));
                }
                ies.push(InformationElement { key, value });
                pos += 2;
            }
            _ => return Err(malformed(pos, "expected IE key or separator")),
        }
    }
    let ue_id = ies
        .iter()
        .find(|ie| ie.key == IeKey::UeId)
        .and_then(|ie| match ie.value {
            IeValue::Int(v) => Some(u64::from(v)),
            _ => None,
        })
        .unwrap_or(0);
    Ok(SignalingMessage { timestamp: 0.0, interface, direction, msg_type, ue_id, ies })
}

/// One next-message prediction record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueSample {
    /// Most recent tokens before the target, at most `context_length`.
    pub history: Vec<TokenId>,
    /// The target message's encoding, ending in the separator.
    pub target: Vec<TokenId>,
}

/// Tokenizes `trace` as one interleaved stream starting with BOS and emits
/// one sample per control-plane message.
pub fn build_message_dataset(
    trace: &MessageTrace,
    context_length: usize,
    vocab: &Vocabulary,
) -> Result<Vec<DialogueSample>, CodecError> {
    let mut stream: Vec<TokenId> = vec![vocab.bos()];
    let mut samples = Vec::new();
    for msg in &trace.messages {
        let encoded = encode_message(msg, vocab)?;
        if msg.is_control_plane() {
            let start = stream.len().saturating_sub(context_length);
            samples.push(DialogueSample { history: stream[start..].to_vec(), target: encoded.clone() });
        }
        stream.extend_from_slice(&encoded);
    }
    Ok(samples)
}

/// Samples from several traces plus the digests of those traces.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MessageDataset {
    pub context_length: usize,
    pub samples: Vec<DialogueSample>,
    pub trace_digests: Vec<String>,
}

impl MessageDataset {
    pub fn from_traces(traces: &[MessageTrace], context_length: usize, vocab: &Vocabulary) -> Result<Self, CodecError> {
        let mut out = MessageDataset { context_length, ..Default::default() };
        for t in traces {
            out.samples.extend(build_message_dataset(t, context_length, vocab)?);
            out.trace_digests.push(t.digest());
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// True if no trace digest is shared with `other`.
    pub fn disjoint_from(&self, digests: &[String]) -> bool {
        !self.trace_digests.iter().any(|d| digests.contains(d))
    }
}

/// Fixed-length normalized view of an admission state, all features in
/// `[0, 1]`:
///
/// * free fraction of radio, compute, storage (3)
/// * pending count per slice over `queue_slots`, clipped (4)
/// * remaining lifetime of each slice's oldest pending request over the
///   slice timeout, 0 when none is pending (4)
/// * active sessions over `max_concurrent_ues` (1)
pub fn state_to_vector(state: &AdmissionState, config: &SimConfig) -> [f64; STATE_DIM] {
    let mut v = [0.0; STATE_DIM];
    let avail = state.available.components();
    let cap = state.capacity.components();
    for r in 0..3 {
        v[r] = if cap[r] > 0 { (avail[r] as f64 / cap[r] as f64).clamp(0.0, 1.0) } else { 0.0 };
    }
    let slots = config.queue_slots.max(1) as f64;
    let mut counts = [0usize; SLICE_COUNT];
    let mut oldest: [Option<&ServiceRequest>; SLICE_COUNT] = [None; SLICE_COUNT];
    for r in &state.pending {
        let k = r.kind.index();
        counts[k] += 1;
        if oldest[k].is_none() {
            oldest[k] = Some(r);
        }
    }
    for k in 0..SLICE_COUNT {
        v[3 + k] = (counts[k] as f64 / slots).min(1.0);
        if let Some(r) = oldest[k] {
            let timeout = config.profiles[k].timeout;
            v[7 + k] = ((r.deadline - state.clock) / timeout).clamp(0.0, 1.0);
        }
    }
    v[11] = (state.active.len() as f64 / state.max_concurrent_ues.max(1) as f64).clamp(0.0, 1.0);
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateActionSample {
    pub state_vec: Vec<f64>,
    /// `i` for admitting pending slot `i`, `queue_slots` for defer.
    pub action_id: usize,
}

pub fn action_to_id(action: AdmissionAction, queue_slots: usize) -> Option<usize> {
    match action {
        AdmissionAction::Admit(i) if i < queue_slots => Some(i),
        AdmissionAction::Admit(_) => None,
        AdmissionAction::Defer => Some(queue_slots),
    }
}

pub fn id_to_action(action_id: usize, queue_slots: usize) -> Option<AdmissionAction> {
    match action_id.cmp(&queue_slots) {
        std::cmp::Ordering::Less => Some(AdmissionAction::Admit(action_id)),
        std::cmp::Ordering::Equal => Some(AdmissionAction::Defer),
        std::cmp::Ordering::Greater => None,
    }
}

/// Policy dataset for one trajectory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyDataset {
    pub samples: Vec<StateActionSample>,
    /// Decisions that admitted a request beyond the visible queue slots and
    /// therefore have no action id.
    pub unrepresentable: usize,
}

/// One sample per decision epoch. Only the oldest `queue_slots` pending
/// requests have action ids.
pub fn build_policy_dataset(trajectory: &Trajectory, config: &SimConfig) -> PolicyDataset {
    let mut out = PolicyDataset::default();
    for d in &trajectory.decisions {
        match action_to_id(d.action, config.queue_slots) {
            Some(action_id) => out.samples.push(StateActionSample {
                state_vec: state_to_vector(&d.state, config).to_vec(),
                action_id,
            }),
            None => out.unrepresentable += 1,
        }
    }
    out
}

/// Text form of message datasets: header line, then one sample per line as
/// space-separated history ids, a tab, and space-separated target ids.
pub fn dataset_to_text(ds: &MessageDataset) -> String {
    let mut out = format!("# message-dataset v1 context_length={} traces={}\n", ds.context_length, ds.trace_digests.join(","));
    for s in &ds.samples {
        let join = |v: &[TokenId]| v.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        out.push_str(&join(&s.history));
        out.push('\t');
        out.push_str(&join(&s.target));
        out.push('\n');
    }
    out
}

pub fn dataset_from_text(text: &str) -> Result<MessageDataset, CodecError> {
    let bad = |line: usize, reason: &str| CodecError::TraceParse { line, reason: reason.to_string() };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| bad(1, "empty dataset file"))?;
    let header = header.strip_prefix("# message-dataset v1 ").ok_or_else(|| bad(1, "missing or unsupported header"))?;
    let mut ds = MessageDataset::default();
    for field in header.split_whitespace() {
        if let Some(v) = field.strip_prefix("context_length=") {
            ds.context_length = v.parse().map_err(|_| bad(1, "bad context_length"))?;
        } else if let Some(v) = field.strip_prefix("traces=") {
            ds.trace_digests = v.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect();
        }
    }
    let parse = |line: usize, s: &str| -> Result<Vec<TokenId>, CodecError> {
        s.split_whitespace().map(|t| t.parse::<TokenId>().map_err(|_| bad(line, "bad token id"))).collect()
    };
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let (h, t) = line.split_once('\t').ok_or_else(|| bad(i + 1, "missing tab separator"))?;
        ds.samples.push(DialogueSample { history: parse(i + 1, h)?, target: parse(i + 1, t)? });
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::ResourceVector;

    fn req(id: u64, kind: SliceKind) -> ServiceRequest {
        ServiceRequest {
            request_id: id,
            tenant_id: 0,
            kind,
            demand: ResourceVector::new(8, 2, 2),
            arrival_time: 1.0,
            service_time: 3.0,
            deadline: 6.0,
        }
    }

    #[test]
    fn vocabulary_is_dense_and_bijective() {
        let v = Vocabulary::default();
        assert_eq!(v.len(), 4 + 3 + 2 + 11 + 6 + 64 + 4 + 2);
        for id in 0..v.len() as TokenId {
            let name = v.name(id).unwrap();
            assert_eq!(v.id_by_name(&name), Some(id));
            assert_eq!(v.id(v.token(id).unwrap()), Some(id));
        }
        assert_eq!(v.token(v.pad()), Some(Token::Pad));
        assert_eq!(v.token(v.sep()), Some(Token::Sep));
    }

    #[test]
    fn accept_template_order() {
        use MessageType::*;
        let msgs = procedure_template(TemplateKind::Accept, &req(5, SliceKind::Hrllc), SessionParams { session_id: 3, qos: 4 });
        let types: Vec<_> = msgs.iter().map(|m| m.msg_type).collect();
        assert_eq!(
            &types[..8],
            &[
                RegistrationRequest,
                RegistrationAccept,
                PduSessionEstablishmentRequest,
                N4SessionEstablishmentRequest,
                N4SessionEstablishmentResponse,
                N2ResourceSetupRequest,
                N2ResourceSetupResponse,
                PduSessionEstablishmentAccept
            ]
        );
        assert_eq!(&types[8..], &[PduSessionReleaseRequest, PduSessionReleaseComplete]);
        let routes: Vec<_> = msgs.iter().map(|m| (m.interface, m.direction)).collect();
        use Direction::*;
        use Interface::*;
        assert_eq!(
            &routes[..8],
            &[
                (N1, ToControlPlane),
                (N1, FromControlPlane),
                (N1, ToControlPlane),
                (N4, FromControlPlane),
                (N4, ToControlPlane),
                (N2, FromControlPlane),
                (N2, ToControlPlane),
                (N1, FromControlPlane)
            ]
        );
        for m in &msgs {
            assert_eq!(m.ue_id, 5);
            m.validate(DEFAULT_ID_POOL).unwrap();
        }
    }

    #[test]
    fn reject_template_ends_with_reject() {
        let msgs = procedure_template(TemplateKind::RejectTimeout, &req(70, SliceKind::MassiveCommunication), SessionParams { session_id: 1, qos: 5 });
        let last = msgs.last().unwrap();
        assert_eq!(last.msg_type, MessageType::PduSessionEstablishmentReject);
        assert_eq!(last.ie(IeKey::Cause), Some(IeValue::Cause(Cause::InsufficientResources)));
        assert!(msgs.iter().all(|m| m.ue_id == 70));
        assert_eq!(msgs[0].ie(IeKey::UeId), Some(IeValue::Int(6)));
    }

    #[test]
    fn missing_cause_is_a_schema_violation() {
        let mut m = procedure_template(TemplateKind::RejectTimeout, &req(1, SliceKind::Hrllc), SessionParams { session_id: 1, qos: 3 })
            .pop()
            .unwrap();
        m.ies.retain(|ie| ie.key != IeKey::Cause);
        let err = encode_message(&m, &Vocabulary::default()).unwrap_err();
        assert!(matches!(err, CodecError::SchemaViolation { .. }));
    }

    #[test]
    fn out_of_pool_value_is_rejected() {
        let mut m = procedure_template(TemplateKind::Accept, &req(1, SliceKind::Hrllc), SessionParams { session_id: 1, qos: 3 })[2].clone();
        m.ies[1].value = IeValue::Int(64);
        assert!(encode_message(&m, &Vocabulary::default()).is_err());
    }

    #[test]
    fn decode_rejects_malformed_sequences() {
        let v = Vocabulary::default();
        assert!(matches!(decode_message(&[], &v), Err(CodecError::MalformedSequence { .. })));
        let m = procedure_template(TemplateKind::Accept, &req(1, SliceKind::Hrllc), SessionParams { session_id: 1, qos: 3 })[0].clone();
        let enc = encode_message(&m, &v).unwrap();
        // IE key before the message type.
        let mut bad = enc.clone();
        bad.swap(2, 3);
        assert!(matches!(decode_message(&bad, &v), Err(CodecError::MalformedSequence { .. })));
        // Truncated.
        assert!(decode_message(&enc[..enc.len() - 1], &v).is_err());
        // Unknown id.
        let mut bad = enc.clone();
        bad[4] = 999;
        assert!(decode_message(&bad, &v).is_err());
        // Reordered IEs.
        let mut bad = enc.clone();
        bad.swap(3, 5);
        bad.swap(4, 6);
        assert!(decode_message(&bad, &v).is_err());
        let back = decode_message(&enc, &v).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn idle_state_vector() {
        let cfg = SimConfig::default();
        let st = AdmissionState::idle(cfg.capacity, cfg.max_concurrent_ues);
        assert_eq!(state_to_vector(&st, &cfg), [1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let mut full = st.clone();
        full.available = ResourceVector::ZERO;
        let v = state_to_vector(&full, &cfg);
        assert_eq!(&v[..3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn action_id_round_trip() {
        for slots in 1..10 {
            for i in 0..=slots {
                let a = id_to_action(i, slots).unwrap();
                assert_eq!(action_to_id(a, slots), Some(i));
            }
            assert_eq!(action_to_id(AdmissionAction::Admit(slots), slots), None);
            assert_eq!(id_to_action(slots + 1, slots), None);
        }
    }

    #[test]
    fn trace_line_round_trip() {
        let mut m = procedure_template(TemplateKind::Accept, &req(77, SliceKind::UbiquitousConnectivity), SessionParams { session_id: 9, qos: 8 })[7].clone();
        m.timestamp = 12.345678901;
        let line = m.to_string();
        assert_eq!(line.parse::<SignalingMessage>().unwrap(), m);
    }

    #[test]
    fn empty_trace_gives_empty_dataset() {
        let t = MessageTrace { messages: vec![], config_digest: String::new() };
        assert!(build_message_dataset(&t, 64, &Vocabulary::default()).unwrap().is_empty());
    }
}
