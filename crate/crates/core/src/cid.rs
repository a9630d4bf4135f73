//! SHA-256 content identifiers.
//!
//! One identifier type serves as block address, DAG node address and Docker
//! blob digest. The canonical text form is `sha256:<64 lowercase hex>`.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

const PREFIX: &str = "sha256:";

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentId([u8; 32]);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CidError {
    #[error("digest is missing the `sha256:` algorithm prefix")]
    MissingAlgorithm,
    #[error("unsupported digest algorithm `{0}`")]
    UnsupportedAlgorithm(String),
    #[error("digest hex must be 64 characters, got {0}")]
    BadLength(usize),
    #[error("digest hex contains invalid character {0:?}")]
    BadCharacter(char),
}

impl ContentId {
    pub const LEN: usize = 32;

    /// Identifier of `data`.
    pub fn digest(data: &[u8]) -> Self {
        ContentId(Sha256::digest(data).into())
    }

    pub const fn from_bytes(bytes: [u8; 32]) -> Self {
        ContentId(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        bytes.try_into().ok().map(ContentId)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Parses the bare 64-character hex form.
    pub fn from_hex(s: &str) -> Result<Self, CidError> {
        if s.len() != 64 {
            return Err(CidError::BadLength(s.len()));
        }
        if let Some(c) = s
            .chars()
            .find(|c| !matches!(c, '0'..='9' | 'a'..='f'))
        {
            return Err(CidError::BadCharacter(c));
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).expect("validated hex");
        Ok(ContentId(out))
    }

    /// First eight hex characters, for logs.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Display for ContentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{PREFIX}{}", self.to_hex())
    }
}

impl fmt::Debug for ContentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentId({})", self.short())
    }
}

impl FromStr for ContentId {
    type Err = CidError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None => Err(CidError::MissingAlgorithm),
            Some(("sha256", hex)) => ContentId::from_hex(hex),
            Some((alg, _)) => Err(CidError::UnsupportedAlgorithm(alg.to_string())),
        }
    }
}

impl serde::Serialize for ContentId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for ContentId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Incremental SHA-256 over a stream.
#[derive(Default, Clone)]
pub struct ContentHasher(Sha256);

impl ContentHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, data: &[u8]) {
        self.0.update(data);
    }

    pub fn finish(self) -> ContentId {
        ContentId(self.0.finalize().into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_digest() {
        // Independently known SHA-256 of the empty string.
        assert_eq!(
            ContentId::digest(b"").to_string(),
            "sha256:e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn parse_rejects_bad_forms() {
        let hex = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855";
        assert_eq!(hex.parse::<ContentId>(), Err(CidError::MissingAlgorithm));
        assert!(matches!(
            format!("sha512:{hex}").parse::<ContentId>(),
            Err(CidError::UnsupportedAlgorithm(_))
        ));
        assert_eq!(
            "sha256:abc".parse::<ContentId>(),
            Err(CidError::BadLength(3))
        );
        let upper = format!("sha256:{}", hex.to_uppercase());
        assert!(matches!(
            upper.parse::<ContentId>(),
            Err(CidError::BadCharacter(_))
        ));
    }

    #[test]
    fn hasher_matches_one_shot() {
        let mut h = ContentHasher::new();
        h.update(b"hello ");
        h.update(b"world");
        assert_eq!(h.finish(), ContentId::digest(b"hello world"));
    }

    proptest::proptest! {
        #[test]
        fn canonical_form_round_trips(bytes in proptest::array::uniform32(0u8..)) {
            let cid = ContentId::from_bytes(bytes);
            let text = cid.to_string();
            let back: ContentId = text.parse().unwrap();
            proptest::prop_assert_eq!(back, cid);
            proptest::prop_assert_eq!(back.to_string(), text);
        }
    }
}
