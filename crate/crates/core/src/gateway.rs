//! Registry V2 HTTP surface: request and response values, routing, and the
//! error body format. Transport-agnostic; the daemon and the simulator both
//! feed requests through [`crate::node::Node::on_http`].

use bytes::Bytes;

use crate::cid::ContentId;
use crate::image::valid_name;

pub const HDR_DIGEST: &str = "Docker-Content-Digest";
pub const HDR_UPLOAD_UUID: &str = "Docker-Upload-UUID";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Get,
    Head,
    Post,
    Put,
    Patch,
    Delete,
    Other,
}

impl Method {
    pub fn parse(s: &str) -> Method {
        match s {
            "GET" => Method::Get,
            "HEAD" => Method::Head,
            "POST" => Method::Post,
            "PUT" => Method::Put,
            "PATCH" => Method::Patch,
            "DELETE" => Method::Delete,
            _ => Method::Other,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpRequest {
    pub method: Method,
    pub path: String,
    pub query: Vec<(String, String)>,
    pub body: Bytes,
}

impl HttpRequest {
    pub fn new(method: Method, path: impl Into<String>) -> Self {
        HttpRequest {
            method,
            path: path.into(),
            query: Vec::new(),
            body: Bytes::new(),
        }
    }

    pub fn get(path: impl Into<String>) -> Self {
        Self::new(Method::Get, path)
    }

    pub fn head(path: impl Into<String>) -> Self {
        Self::new(Method::Head, path)
    }

    pub fn with_query(mut self, k: &str, v: &str) -> Self {
        self.query.push((k.to_string(), v.to_string()));
        self
    }

    pub fn with_body(mut self, body: impl Into<Bytes>) -> Self {
        self.body = body.into();
        self
    }

    pub fn query_param(&self, k: &str) -> Option<&str> {
        self.query
            .iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
    }

    /// Splits a raw query string (`a=b&c=d`), percent-decoding `%3A`.
    pub fn parse_query(raw: &str) -> Vec<(String, String)> {
        raw.split('&')
            .filter(|p| !p.is_empty())
            .map(|p| {
                let (k, v) = p.split_once('=').unwrap_or((p, ""));
                (percent_decode(k), percent_decode(v))
            })
            .collect()
    }
}

fn percent_decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' && i + 2 < bytes.len() {
            if let Ok(b) = u8::from_str_radix(&s[i + 1..i + 3], 16) {
                out.push(b);
                i += 3;
                continue;
            }
        }
        out.push(if bytes[i] == b'+' { b' ' } else { bytes[i] });
        i += 1;
    }
    String::from_utf8_lossy(&out).into_owned()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    Empty,
    Bytes(Bytes),
    /// A stored blob, streamed from its DAG.
    Blob { root: ContentId, len: u64 },
}

impl Body {
    pub fn len(&self) -> u64 {
        match self {
            Body::Empty => 0,
            Body::Bytes(b) => b.len() as u64,
            Body::Blob { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct HttpResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Body,
}

impl HttpResponse {
    pub fn new(status: u16) -> Self {
        HttpResponse {
            status,
            headers: Vec::new(),
            body: Body::Empty,
        }
    }

    pub fn header(mut self, k: &str, v: impl Into<String>) -> Self {
        self.headers.push((k.to_string(), v.into()));
        self
    }

    pub fn body(mut self, body: Body) -> Self {
        self.body = body;
        self
    }

    pub fn json(status: u16, text: &str) -> Self {
        HttpResponse::new(status)
            .header("Content-Type", "application/json")
            .body(Body::Bytes(Bytes::copy_from_slice(text.as_bytes())))
    }

    pub fn error(status: u16, code: ErrorCode, message: &str) -> Self {
        let body = serde_json::json!({
            "errors": [{ "code": code.as_str(), "message": message }]
        });
        HttpResponse::json(status, &body.to_string())
    }

    pub fn get_header(&self, k: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(key, _)| key.eq_ignore_ascii_case(k))
            .map(|(_, v)| v.as_str())
    }

    /// Drops the body, keeping headers, for HEAD.
    pub fn without_body(mut self) -> Self {
        self.body = Body::Empty;
        self
    }

    /// First error code in a registry error body.
    pub fn error_code(&self) -> Option<String> {
        let Body::Bytes(b) = &self.body else { return None };
        let v: serde_json::Value = serde_json::from_slice(b).ok()?;
        v["errors"][0]["code"].as_str().map(str::to_string)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    ManifestUnknown,
    ManifestInvalid,
    BlobUnknown,
    BlobUploadUnknown,
    DigestInvalid,
    NameInvalid,
    TagInvalid,
    Unsupported,
    Unavailable,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::ManifestUnknown => "MANIFEST_UNKNOWN",
            ErrorCode::ManifestInvalid => "MANIFEST_INVALID",
            ErrorCode::BlobUnknown => "BLOB_UNKNOWN",
            ErrorCode::BlobUploadUnknown => "BLOB_UPLOAD_UNKNOWN",
            ErrorCode::DigestInvalid => "DIGEST_INVALID",
            ErrorCode::NameInvalid => "NAME_INVALID",
            ErrorCode::TagInvalid => "TAG_INVALID",
            ErrorCode::Unsupported => "UNSUPPORTED",
            ErrorCode::Unavailable => "UNAVAILABLE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Route {
    Base,
    Manifest { name: String, reference: String },
    Blob { name: String, digest: String },
    StartUpload { name: String },
    Upload { name: String, id: String },
    Unknown,
    BadName(String),
}

/// Maps a request path onto a registry endpoint. Repository names may
/// contain slashes, so the endpoint keyword is searched from the right.
pub fn route(path: &str) -> Route {
    let Some(rest) = path.strip_prefix("/v2/") else {
        return if path == "/v2" { Route::Base } else { Route::Unknown };
    };
    if rest.is_empty() {
        return Route::Base;
    }
    let check = |name: &str| -> Option<Route> {
        if valid_name(name) {
            None
        } else {
            Some(Route::BadName(name.to_string()))
        }
    };
    if let Some(i) = rest.rfind("/blobs/uploads") {
        let name = &rest[..i];
        if let Some(bad) = check(name) {
            return bad;
        }
        let tail = rest[i + "/blobs/uploads".len()..].trim_start_matches('/');
        return if tail.is_empty() {
            Route::StartUpload { name: name.to_string() }
        } else {
            Route::Upload { name: name.to_string(), id: tail.to_string() }
        };
    }
    for (kw, is_manifest) in [("/manifests/", true), ("/blobs/", false)] {
        if let Some(i) = rest.rfind(kw) {
            let name = &rest[..i];
            let tail = &rest[i + kw.len()..];
            if tail.is_empty() || tail.contains('/') {
                return Route::Unknown;
            }
            if let Some(bad) = check(name) {
                return bad;
            }
            return if is_manifest {
                Route::Manifest { name: name.to_string(), reference: tail.to_string() }
            } else {
                Route::Blob { name: name.to_string(), digest: tail.to_string() }
            };
        }
    }
    Route::Unknown
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routes() {
        assert_eq!(route("/v2/"), Route::Base);
        assert_eq!(
            route("/v2/library/app/manifests/latest"),
            Route::Manifest { name: "library/app".into(), reference: "latest".into() }
        );
        assert_eq!(
            route("/v2/a/b/c/blobs/sha256:00"),
            Route::Blob { name: "a/b/c".into(), digest: "sha256:00".into() }
        );
        assert_eq!(route("/v2/app/blobs/uploads/"), Route::StartUpload { name: "app".into() });
        assert_eq!(
            route("/v2/app/blobs/uploads/abc"),
            Route::Upload { name: "app".into(), id: "abc".into() }
        );
        assert!(matches!(route("/v2/App/manifests/x"), Route::BadName(_)));
        assert_eq!(route("/other"), Route::Unknown);
    }

    #[test]
    fn error_body_shape() {
        let r = HttpResponse::error(404, ErrorCode::BlobUnknown, "nope");
        assert_eq!(r.error_code().as_deref(), Some("BLOB_UNKNOWN"));
        let Body::Bytes(b) = &r.body else { panic!() };
        let v: serde_json::Value = serde_json::from_slice(b).unwrap();
        assert_eq!(v["errors"][0]["message"], "nope");
    }

    #[test]
    fn query_decoding() {
        let q = HttpRequest::parse_query("digest=sha256%3Aab&x=1");
        assert_eq!(q[0], ("digest".to_string(), "sha256:ab".to_string()));
        assert_eq!(q[1].1, "1");
    }
}
