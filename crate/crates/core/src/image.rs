//! Docker image manifests (schema 2), references, and layer bookkeeping.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use bytes::Bytes;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cas::{chunk_bytes, Store};
use crate::cid::ContentId;
use crate::error::CasError;

pub const MEDIA_MANIFEST: &str = "application/vnd.docker.distribution.manifest.v2+json";
pub const MEDIA_CONFIG: &str = "application/vnd.docker.container.image.v1+json";
pub const MEDIA_LAYER: &str = "application/vnd.docker.image.rootfs.diff.tar.gzip";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ManifestError {
    #[error("manifest is not valid JSON: {0}")]
    Malformed(String),
    #[error("unsupported manifest schema version {0}")]
    UnsupportedSchema(i64),
    #[error("manifest is missing field `{0}`")]
    MissingField(&'static str),
    #[error("manifest field `{field}` is invalid: {why}")]
    InvalidField { field: &'static str, why: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RefError {
    #[error("invalid repository name {0:?}")]
    Name(String),
    #[error("invalid tag {0:?}")]
    Tag(String),
    #[error("invalid digest: {0}")]
    Digest(String),
}

// Field order is the canonical key order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Descriptor {
    pub digest: ContentId,
    #[serde(rename = "mediaType")]
    pub media_type: String,
    pub size: u64,
}

#[derive(Serialize)]
struct CanonicalManifest<'a> {
    config: &'a Descriptor,
    layers: &'a [Descriptor],
    #[serde(rename = "mediaType")]
    media_type: &'a str,
    #[serde(rename = "schemaVersion")]
    schema_version: u32,
}

/// A schema-2 manifest together with the exact bytes that identify it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageManifest {
    pub media_type: String,
    pub config: Descriptor,
    pub layers: Vec<Descriptor>,
    bytes: Bytes,
}

impl ImageManifest {
    pub const SCHEMA_VERSION: u32 = 2;

    /// Builds a manifest and its canonical form: sorted keys, no whitespace.
    pub fn new(config: Descriptor, layers: Vec<Descriptor>) -> Self {
        let bytes = serde_json::to_vec(&CanonicalManifest {
            config: &config,
            layers: &layers,
            media_type: MEDIA_MANIFEST,
            schema_version: Self::SCHEMA_VERSION,
        })
        .expect("manifest serializes");
        ImageManifest {
            media_type: MEDIA_MANIFEST.to_string(),
            config,
            layers,
            bytes: Bytes::from(bytes),
        }
    }

    /// Parses manifest bytes. The bytes are kept verbatim as the identity, so
    /// a manifest produced elsewhere keeps its original digest.
    pub fn parse(bytes: impl Into<Bytes>) -> Result<Self, ManifestError> {
        let bytes: Bytes = bytes.into();
        let v: serde_json::Value =
            serde_json::from_slice(&bytes).map_err(|e| ManifestError::Malformed(e.to_string()))?;
        let obj = v
            .as_object()
            .ok_or_else(|| ManifestError::Malformed("top level is not an object".into()))?;
        let schema = obj
            .get("schemaVersion")
            .ok_or(ManifestError::MissingField("schemaVersion"))?
            .as_i64()
            .ok_or_else(|| ManifestError::InvalidField {
                field: "schemaVersion",
                why: "not an integer".into(),
            })?;
        if schema != Self::SCHEMA_VERSION as i64 {
            return Err(ManifestError::UnsupportedSchema(schema));
        }
        let media_type = match obj.get("mediaType") {
            None => return Err(ManifestError::MissingField("mediaType")),
            Some(m) => m.as_str().ok_or_else(|| ManifestError::InvalidField {
                field: "mediaType",
                why: "not a string".into(),
            })?,
        };
        if media_type != MEDIA_MANIFEST {
            return Err(ManifestError::InvalidField {
                field: "mediaType",
                why: format!("expected {MEDIA_MANIFEST}, got {media_type}"),
            });
        }
        let config = obj.get("config").ok_or(ManifestError::MissingField("config"))?;
        let config = descriptor(config, "config")?;
        let layers = obj
            .get("layers")
            .ok_or(ManifestError::MissingField("layers"))?
            .as_array()
            .ok_or_else(|| ManifestError::InvalidField {
                field: "layers",
                why: "not an array".into(),
            })?
            .iter()
            .map(|l| descriptor(l, "layers"))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ImageManifest {
            media_type: media_type.to_string(),
            config,
            layers,
            bytes,
        })
    }

    pub fn bytes(&self) -> &Bytes {
        &self.bytes
    }

    pub fn digest(&self) -> ContentId {
        ContentId::digest(&self.bytes)
    }

    /// Config followed by layers, the order a client fetches them in.
    pub fn blobs(&self) -> impl Iterator<Item = &Descriptor> {
        std::iter::once(&self.config).chain(self.layers.iter())
    }

    pub fn layer_bytes(&self) -> u64 {
        self.layers.iter().map(|l| l.size).sum()
    }
}

fn descriptor(v: &serde_json::Value, field: &'static str) -> Result<Descriptor, ManifestError> {
    let obj = v.as_object().ok_or_else(|| ManifestError::InvalidField {
        field,
        why: "descriptor is not an object".into(),
    })?;
    for key in ["digest", "mediaType", "size"] {
        if !obj.contains_key(key) {
            return Err(ManifestError::MissingField(match key {
                "digest" => "digest",
                "mediaType" => "mediaType",
                _ => "size",
            }));
        }
    }
    serde_json::from_value(v.clone()).map_err(|e| ManifestError::InvalidField {
        field,
        why: e.to_string(),
    })
}

/// A pushed image: manifest plus the DAG roots of everything it names.
#[derive(Debug, Clone)]
pub struct BuiltImage {
    pub manifest: ImageManifest,
    pub manifest_root: ContentId,
    pub config_root: ContentId,
    pub layer_roots: Vec<ContentId>,
}

impl BuiltImage {
    pub fn roots(&self) -> Vec<ContentId> {
        let mut v = vec![self.manifest_root, self.config_root];
        v.extend(&self.layer_roots);
        v
    }
}

/// Chunks every layer and the config into `store` and builds the manifest.
/// The manifest bytes are stored as a blob too, so peers fetch them like layers.
pub fn build_image(store: &Store, layers: &[&[u8]], config: &[u8]) -> Result<BuiltImage, CasError> {
    if layers.is_empty() {
        return Err(CasError::InvalidArgument("an image needs at least one layer".into()));
    }
    let cs = store.chunk_size();
    let cfg = chunk_bytes(store, config, cs)?;
    let mut descs = Vec::with_capacity(layers.len());
    let mut roots = Vec::with_capacity(layers.len());
    for layer in layers {
        let f = chunk_bytes(store, layer, cs)?;
        descs.push(Descriptor {
            digest: f.file_digest,
            media_type: MEDIA_LAYER.to_string(),
            size: f.total_size,
        });
        roots.push(f.root);
    }
    let manifest = ImageManifest::new(
        Descriptor {
            digest: cfg.file_digest,
            media_type: MEDIA_CONFIG.to_string(),
            size: cfg.total_size,
        },
        descs,
    );
    let m = chunk_bytes(store, manifest.bytes(), cs)?;
    Ok(BuiltImage {
        manifest,
        manifest_root: m.root,
        config_root: cfg.root,
        layer_roots: roots,
    })
}

/// Layer digests whose DAG is not complete in `store`, in manifest order.
pub fn missing_layers(manifest: &ImageManifest, store: &Store) -> Vec<ContentId> {
    manifest
        .layers
        .iter()
        .filter(|l| !blob_complete(store, &l.digest))
        .map(|l| l.digest)
        .collect()
}

/// Whether the blob with registry digest `digest` can be assembled locally.
pub fn blob_complete(store: &Store, digest: &ContentId) -> bool {
    match store.resolve_digest(digest) {
        Some(root) => store.is_complete(&root),
        None => false,
    }
}

fn name_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[a-z0-9]+(?:[._/-][a-z0-9]+)*$").unwrap())
}

fn tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Za-z0-9_][A-Za-z0-9._-]{0,127}$").unwrap())
}

pub fn valid_name(name: &str) -> bool {
    name_re().is_match(name)
}

pub fn valid_tag(tag: &str) -> bool {
    tag_re().is_match(tag)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Reference {
    Tag(String),
    Digest(ContentId),
}

impl Reference {
    pub fn parse(s: &str) -> Result<Self, RefError> {
        if s.contains(':') {
            s.parse()
                .map(Reference::Digest)
                .map_err(|e: crate::cid::CidError| RefError::Digest(e.to_string()))
        } else if valid_tag(s) {
            Ok(Reference::Tag(s.to_string()))
        } else {
            Err(RefError::Tag(s.to_string()))
        }
    }
}

impl fmt::Display for Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reference::Tag(t) => f.write_str(t),
            Reference::Digest(d) => write!(f, "{d}"),
        }
    }
}

/// `name:tag` or `name@sha256:...`; a bare name means `latest`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageRef {
    pub name: String,
    pub reference: Reference,
}

impl FromStr for ImageRef {
    type Err = RefError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, reference) = if let Some((n, d)) = s.split_once('@') {
            (n, Reference::parse(d)?)
        } else {
            match s.rfind(':') {
                Some(i) if !s[i + 1..].contains('/') => (&s[..i], Reference::parse(&s[i + 1..])?),
                _ => (s, Reference::Tag("latest".into())),
            }
        };
        if !valid_name(name) {
            return Err(RefError::Name(name.to_string()));
        }
        Ok(ImageRef {
            name: name.to_string(),
            reference,
        })
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.reference {
            Reference::Tag(t) => write!(f, "{}:{t}", self.name),
            Reference::Digest(d) => write!(f, "{}@{d}", self.name),
        }
    }
}
