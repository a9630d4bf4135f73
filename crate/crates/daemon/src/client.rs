//! A registry V2 client for pushing and pulling whole images.

use bytes::Bytes;
use edgepier_core::gateway::HDR_DIGEST;
use edgepier_core::image::{Descriptor, ImageManifest, ManifestError, MEDIA_CONFIG, MEDIA_LAYER, MEDIA_MANIFEST};
use edgepier_core::ContentId;
use http_body_util::{BodyExt, Full};
use hyper::header::{HeaderMap, ACCEPT, CONTENT_TYPE, LOCATION};
use hyper::{Method, Request, StatusCode};
use hyper_util::client::legacy::connect::HttpConnector;
use hyper_util::client::legacy::Client;
use hyper_util::rt::TokioExecutor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("http: {0}")]
    Http(String),
    #[error("registry answered {status}: {code} {message}")]
    Registry {
        status: u16,
        code: String,
        message: String,
    },
    #[error("{what} should hash to {expected} but hashes to {actual}")]
    Digest {
        what: String,
        expected: ContentId,
        actual: ContentId,
    },
    #[error("manifest: {0}")]
    Manifest(#[from] ManifestError),
    #[error("{0}")]
    Protocol(String),
}

impl ClientError {
    /// Registry error code, when the registry sent one.
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Registry { code, .. } => Some(code),
            _ => None,
        }
    }
}

/// An image as pulled: the manifest and each blob's verified bytes.
#[derive(Debug, Clone)]
pub struct PulledImage {
    pub manifest: ImageManifest,
    pub config: Bytes,
    pub layers: Vec<Bytes>,
}

struct Reply {
    status: StatusCode,
    headers: HeaderMap,
    body: Bytes,
}

#[derive(Clone)]
pub struct RegistryClient {
    base: String,
    http: Client<HttpConnector, Full<Bytes>>,
}

impl RegistryClient {
    /// `registry` is `host:port`, optionally prefixed with `http://`.
    pub fn new(registry: &str) -> Self {
        let base = if registry.starts_with("http://") {
            registry.trim_end_matches('/').to_string()
        } else {
            format!("http://{}", registry.trim_end_matches('/'))
        };
        RegistryClient {
            base,
            http: Client::builder(TokioExecutor::new()).build_http(),
        }
    }

    async fn call(&self, method: Method, path: &str, body: Bytes, accept: Option<&str>) -> Result<Reply, ClientError> {
        let uri = if path.starts_with("http://") {
            path.to_string()
        } else {
            format!("{}{path}", self.base)
        };
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(a) = accept {
            req = req.header(ACCEPT, a);
        }
        if !body.is_empty() {
            req = req.header(CONTENT_TYPE, "application/octet-stream");
        }
        let req = req
            .body(Full::new(body))
            .map_err(|e| ClientError::Http(e.to_string()))?;
        let resp = self
            .http
            .request(req)
            .await
            .map_err(|e| ClientError::Http(e.to_string()))?;
        let status = resp.status();
        let headers = resp.headers().clone();
        let body = resp
            .into_body()
            .collect()
            .await
            .map_err(|e| ClientError::Http(e.to_string()))?
            .to_bytes();
        Ok(Reply { status, headers, body })
    }

    fn expect(reply: Reply, ok: &[StatusCode]) -> Result<Reply, ClientError> {
        if ok.contains(&reply.status) {
            return Ok(reply);
        }
        let v: serde_json::Value = serde_json::from_slice(&reply.body).unwrap_or_default();
        let field = |k: &str| v["errors"][0][k].as_str().map(str::to_string);
        Err(ClientError::Registry {
            status: reply.status.as_u16(),
            code: field("code").unwrap_or_else(|| "UNKNOWN".into()),
            message: field("message").unwrap_or_default(),
        })
    }

    /// `GET /v2/`; succeeds when a registry answers there.
    pub async fn ping(&self) -> Result<(), ClientError> {
        let r = self.call(Method::GET, "/v2/", Bytes::new(), None).await?;
        Self::expect(r, &[StatusCode::OK]).map(|_| ())
    }

    /// Monolithic upload of one blob. Returns its digest.
    pub async fn push_blob(&self, name: &str, data: Bytes) -> Result<ContentId, ClientError> {
        let digest = ContentId::digest(&data);
        let r = self
            .call(Method::POST, &format!("/v2/{name}/blobs/uploads/"), Bytes::new(), None)
            .await?;
        let r = Self::expect(r, &[StatusCode::ACCEPTED])?;
        let location = r
            .headers
            .get(LOCATION)
            .and_then(|v| v.to_str().ok())
            .ok_or_else(|| ClientError::Protocol("upload response has no Location".into()))?;
        let sep = if location.contains('?') { '&' } else { '?' };
        let r = self
            .call(Method::PUT, &format!("{location}{sep}digest={digest}"), data, None)
            .await?;
        Self::expect(r, &[StatusCode::CREATED])?;
        Ok(digest)
    }

    /// Uploads the blobs, then the manifest under `tag`. Returns the
    /// manifest digest.
    pub async fn push(&self, name: &str, tag: &str, layers: &[Bytes], config: Bytes) -> Result<ContentId, ClientError> {
        let cfg = Descriptor {
            size: config.len() as u64,
            digest: self.push_blob(name, config).await?,
            media_type: MEDIA_CONFIG.to_string(),
        };
        let mut descs = Vec::with_capacity(layers.len());
        for l in layers {
            descs.push(Descriptor {
                size: l.len() as u64,
                digest: self.push_blob(name, l.clone()).await?,
                media_type: MEDIA_LAYER.to_string(),
            });
        }
        let manifest = ImageManifest::new(cfg, descs);
        let r = self
            .call(
                Method::PUT,
                &format!("/v2/{name}/manifests/{tag}"),
                manifest.bytes().clone(),
                None,
            )
            .await?;
        Self::expect(r, &[StatusCode::CREATED])?;
        Ok(manifest.digest())
    }

    pub async fn manifest(&self, name: &str, reference: &str) -> Result<ImageManifest, ClientError> {
        let r = self
            .call(
                Method::GET,
                &format!("/v2/{name}/manifests/{reference}"),
                Bytes::new(),
                Some(MEDIA_MANIFEST),
            )
            .await?;
        let r = Self::expect(r, &[StatusCode::OK])?;
        let m = ImageManifest::parse(r.body)?;
        let claimed = r.headers.get(HDR_DIGEST).and_then(|v| v.to_str().ok());
        let expected = match reference.parse::<ContentId>() {
            Ok(d) => Some(d),
            Err(_) => claimed.and_then(|c| c.parse().ok()),
        };
        if let Some(expected) = expected {
            if expected != m.digest() {
                return Err(ClientError::Digest {
                    what: format!("manifest {name}:{reference}"),
                    expected,
                    actual: m.digest(),
                });
            }
        }
        Ok(m)
    }

    /// Fetches a blob and checks its bytes against `digest`.
    pub async fn blob(&self, name: &str, digest: &ContentId) -> Result<Bytes, ClientError> {
        let r = self
            .call(Method::GET, &format!("/v2/{name}/blobs/{digest}"), Bytes::new(), None)
            .await?;
        let r = Self::expect(r, &[StatusCode::OK])?;
        let actual = ContentId::digest(&r.body);
        if actual != *digest {
            return Err(ClientError::Digest {
                what: format!("blob of {name}"),
                expected: *digest,
                actual,
            });
        }
        Ok(r.body)
    }

    /// Pulls an image the way a container runtime does: manifest, then
    /// config, then each layer in order.
    pub async fn pull(&self, name: &str, reference: &str) -> Result<PulledImage, ClientError> {
        let manifest = self.manifest(name, reference).await?;
        let config = self.blob(name, &manifest.config.digest).await?;
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for l in &manifest.layers {
            let b = self.blob(name, &l.digest).await?;
            if b.len() as u64 != l.size {
                return Err(ClientError::Protocol(format!(
                    "layer {} is {} bytes, manifest says {}",
                    l.digest,
                    b.len(),
                    l.size
                )));
            }
            layers.push(b);
        }
        Ok(PulledImage { manifest, config, layers })
    }
}
