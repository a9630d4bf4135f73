use bytes::Bytes;
use log::{info, warn};

use super::{Env, FetchResult, Job, JobId, Node, RequestId};
use crate::cas::chunk_bytes;
use crate::cid::ContentId;
use crate::error::CasError;
use crate::exchange::FetchFailure;
use crate::gateway::{
    route, Body, ErrorCode, HttpRequest, HttpResponse, Method, Route, HDR_DIGEST, HDR_UPLOAD_UUID,
};
use crate::image::{blob_complete, BuiltImage, ImageManifest, Reference, MEDIA_MANIFEST};

const API_VERSION: (&str, &str) = ("Docker-Distribution-API-Version", "registry/2.0");

/// Response for a failed store write.
pub fn http_error_for(e: &CasError) -> HttpResponse {
    match e {
        CasError::Capacity { .. } => {
            HttpResponse::error(507, ErrorCode::Unavailable, &e.to_string())
        }
        CasError::DigestMismatch { .. } | CasError::Integrity(_) => {
            HttpResponse::error(400, ErrorCode::DigestInvalid, &e.to_string())
        }
        _ => HttpResponse::error(500, ErrorCode::Unavailable, &e.to_string()),
    }
}

fn fetch_error(manifest: bool, why: &FetchFailure) -> HttpResponse {
    match why {
        FetchFailure::NotFound if manifest => {
            HttpResponse::error(404, ErrorCode::ManifestUnknown, "manifest unknown")
        }
        FetchFailure::NotFound => HttpResponse::error(404, ErrorCode::BlobUnknown, "blob unknown"),
        FetchFailure::Incomplete(missing) => HttpResponse::error(
            503,
            ErrorCode::Unavailable,
            &format!("{} blocks could not be retrieved", missing.len()),
        ),
    }
}

impl Node {
    pub fn on_http(&mut self, env: &mut dyn Env, req: RequestId, r: HttpRequest) {
        let head = r.method == Method::Head;
        match (route(&r.path), r.method) {
            (Route::Base, Method::Get | Method::Head) => {
                let resp = HttpResponse::json(200, "{}").header(API_VERSION.0, API_VERSION.1);
                env.respond(req, if head { resp.without_body() } else { resp });
            }
            (Route::Manifest { name, reference }, Method::Get | Method::Head) => {
                self.get_manifest(env, req, head, &name, &reference)
            }
            (Route::Manifest { name, reference }, Method::Put) => {
                let resp = self.put_manifest(env, &name, &reference, r.body);
                env.respond(req, resp);
            }
            (Route::Blob { digest, .. }, Method::Get | Method::Head) => {
                self.get_blob(env, req, head, &digest)
            }
            (Route::StartUpload { name }, Method::Post) => {
                let resp = match r.query_param("digest") {
                    Some(d) => self.put_blob(env, &name, d, r.body.clone()),
                    None => {
                        let id = format!("{:016x}{:016x}", env.random(), env.random());
                        self.open_uploads.insert(id.clone());
                        HttpResponse::new(202)
                            .header("Location", format!("/v2/{name}/blobs/uploads/{id}"))
                            .header(HDR_UPLOAD_UUID, id)
                            .header("Range", "0-0")
                    }
                };
                env.respond(req, resp);
            }
            (Route::Upload { name, id }, Method::Put) => {
                let resp = if !self.open_uploads.remove(&id) {
                    HttpResponse::error(404, ErrorCode::BlobUploadUnknown, "upload unknown")
                } else {
                    match r.query_param("digest") {
                        Some(d) => self.put_blob(env, &name, d, r.body.clone()),
                        None => HttpResponse::error(
                            400,
                            ErrorCode::DigestInvalid,
                            "digest parameter required",
                        ),
                    }
                };
                env.respond(req, resp);
            }
            (Route::Upload { .. }, Method::Patch) => env.respond(
                req,
                HttpResponse::error(405, ErrorCode::Unsupported, "chunked upload is not supported"),
            ),
            (Route::BadName(n), _) => env.respond(
                req,
                HttpResponse::error(400, ErrorCode::NameInvalid, &format!("invalid name {n:?}")),
            ),
            (Route::Unknown, _) => env.respond(req, HttpResponse::new(404)),
            _ => env.respond(
                req,
                HttpResponse::error(405, ErrorCode::Unsupported, "method not allowed"),
            ),
        }
    }

    // ---- pull ---------------------------------------------------------

    fn get_manifest(&mut self, env: &mut dyn Env, req: RequestId, head: bool, name: &str, reference: &str) {
        match Reference::parse(reference) {
            Err(e) => {
                let code = if reference.contains(':') {
                    ErrorCode::DigestInvalid
                } else {
                    ErrorCode::TagInvalid
                };
                env.respond(req, HttpResponse::error(400, code, &e.to_string()));
            }
            Ok(Reference::Digest(d)) => self.manifest_by_digest(env, req, head, d),
            Ok(Reference::Tag(tag)) => {
                if let Some(d) = self.replica.resolve_tag(name, &tag) {
                    return self.manifest_by_digest(env, req, head, d);
                }
                if !self.cfg.p2p {
                    return env.respond(
                        req,
                        HttpResponse::error(404, ErrorCode::ManifestUnknown, "tag unknown"),
                    );
                }
                let job = self.new_job(Job::ResolveTag {
                    req,
                    head,
                    name: name.to_string(),
                    tag,
                    attempt: 0,
                });
                self.ask_for_tags(env);
                let delay = self.cfg.retry_schedule.first().copied().unwrap_or(0);
                env.set_timer(delay, super::Timer::Retry(job));
            }
        }
    }

    pub(super) fn retry_tag(&mut self, env: &mut dyn Env, id: JobId) {
        let Some(Job::ResolveTag {
            req,
            head,
            name,
            tag,
            attempt,
        }) = self.jobs.remove(&id)
        else {
            return;
        };
        if let Some(d) = self.replica.resolve_tag(&name, &tag) {
            return self.manifest_by_digest(env, req, head, d);
        }
        let attempt = attempt + 1;
        if attempt >= self.cfg.retry_schedule.len() {
            return env.respond(
                req,
                HttpResponse::error(404, ErrorCode::ManifestUnknown, &format!("{name}:{tag} unknown")),
            );
        }
        self.jobs.insert(
            id,
            Job::ResolveTag {
                req,
                head,
                name,
                tag,
                attempt,
            },
        );
        self.ask_for_tags(env);
        env.set_timer(self.cfg.retry_schedule[attempt], super::Timer::Retry(id));
    }

    /// Resolves waiting tag lookups after the pinset changed.
    pub(super) fn tags_changed(&mut self, env: &mut dyn Env) {
        let ready: Vec<JobId> = self
            .jobs
            .iter()
            .filter_map(|(id, j)| match j {
                Job::ResolveTag { name, tag, .. } if self.replica.resolve_tag(name, tag).is_some() => {
                    Some(*id)
                }
                _ => None,
            })
            .collect();
        for id in ready {
            self.retry_tag(env, id);
        }
    }

    fn manifest_by_digest(&mut self, env: &mut dyn Env, req: RequestId, head: bool, d: ContentId) {
        if blob_complete(&self.store, &d) {
            let resp = self.manifest_response(d);
            return env.respond(req, if head { resp.without_body() } else { resp });
        }
        if !self.cfg.p2p {
            return env.respond(
                req,
                HttpResponse::error(404, ErrorCode::ManifestUnknown, "manifest unknown"),
            );
        }
        if head {
            let job = self.new_job(Job::Head {
                req,
                digest: d,
                manifest: true,
            });
            return self.start_lookup(env, d, Some(job));
        }
        let job = self.new_job(Job::Manifest { req, digest: d });
        self.fetch(env, d, Some(job));
    }

    fn manifest_response(&mut self, d: ContentId) -> HttpResponse {
        let root = self.store.resolve_digest(&d).expect("complete blob has a root");
        let bytes = match self.store.assemble(&root) {
            Ok(b) => Bytes::from(b),
            Err(e) => return http_error_for(&e),
        };
        let media = match ImageManifest::parse(bytes.clone()) {
            Ok(m) => {
                let t = m.media_type.clone();
                self.remember_manifest(d, m);
                t
            }
            Err(e) => {
                warn!("stored manifest {} does not parse: {e}", d.short());
                MEDIA_MANIFEST.to_string()
            }
        };
        HttpResponse::new(200)
            .header("Content-Type", media)
            .header("Content-Length", bytes.len().to_string())
            .header(HDR_DIGEST, d.to_string())
            .body(Body::Bytes(bytes))
    }

    pub(super) fn remember_manifest(&mut self, d: ContentId, m: ImageManifest) {
        self.known_sizes.insert(d, m.bytes().len() as u64);
        for b in m.blobs() {
            self.known_sizes.insert(b.digest, b.size);
        }
        self.manifests.insert(d, m);
    }

    pub(super) fn finish_manifest_get(&mut self, env: &mut dyn Env, req: RequestId, d: ContentId, r: FetchResult) {
        let resp = match r {
            FetchResult::Ok(_) => {
                let resp = self.manifest_response(d);
                self.check_auto_pin(env);
                resp
            }
            FetchResult::Failed(why) => fetch_error(true, &why),
        };
        env.respond(req, resp);
    }

    fn get_blob(&mut self, env: &mut dyn Env, req: RequestId, head: bool, digest: &str) {
        let d: ContentId = match digest.parse() {
            Ok(d) => d,
            Err(e) => {
                return env.respond(
                    req,
                    HttpResponse::error(400, ErrorCode::DigestInvalid, &format!("{e}")),
                )
            }
        };
        if blob_complete(&self.store, &d) {
            let resp = self.blob_response(d);
            return env.respond(req, if head { resp.without_body() } else { resp });
        }
        if !self.cfg.p2p {
            return env.respond(req, HttpResponse::error(404, ErrorCode::BlobUnknown, "blob unknown"));
        }
        if head {
            let job = self.new_job(Job::Head {
                req,
                digest: d,
                manifest: false,
            });
            return self.start_lookup(env, d, Some(job));
        }
        let job = self.new_job(Job::Blob { req, digest: d });
        self.fetch(env, d, Some(job));
    }

    fn blob_response(&mut self, d: ContentId) -> HttpResponse {
        let root = self.store.resolve_digest(&d).expect("complete blob has a root");
        self.store.touch(&root);
        let len = self.store.root_info(&root).map(|(_, l)| l).unwrap_or(0);
        HttpResponse::new(200)
            .header("Content-Type", "application/octet-stream")
            .header("Content-Length", len.to_string())
            .header(HDR_DIGEST, d.to_string())
            .body(Body::Blob { root, len })
    }

    pub(super) fn finish_blob_get(&mut self, env: &mut dyn Env, req: RequestId, d: ContentId, r: FetchResult) {
        let resp = match r {
            FetchResult::Ok(_) => self.blob_response(d),
            FetchResult::Failed(why) => fetch_error(false, &why),
        };
        env.respond(req, resp);
    }

    /// Answers a HEAD that waited on a provider lookup. No blocks move.
    pub(super) fn resume_head(&mut self, env: &mut dyn Env, id: JobId, found: bool) {
        let Some(Job::Head {
            req,
            digest,
            manifest,
        }) = self.jobs.remove(&id)
        else {
            return;
        };
        if !found {
            let resp = if manifest {
                HttpResponse::error(404, ErrorCode::ManifestUnknown, "manifest unknown")
            } else {
                HttpResponse::error(404, ErrorCode::BlobUnknown, "blob unknown")
            };
            return env.respond(req, resp.without_body());
        }
        let mut resp = HttpResponse::new(200).header(HDR_DIGEST, digest.to_string()).header(
            "Content-Type",
            if manifest {
                MEDIA_MANIFEST
            } else {
                "application/octet-stream"
            },
        );
        if let Some(len) = self.known_sizes.get(&digest) {
            resp = resp.header("Content-Length", len.to_string());
        }
        env.respond(req, resp);
    }

    // ---- push ---------------------------------------------------------

    fn put_blob(&mut self, env: &mut dyn Env, name: &str, digest: &str, body: Bytes) -> HttpResponse {
        let d: ContentId = match digest.parse() {
            Ok(d) => d,
            Err(e) => return HttpResponse::error(400, ErrorCode::DigestInvalid, &format!("{e}")),
        };
        let actual = ContentId::digest(&body);
        if actual != d {
            return HttpResponse::error(
                400,
                ErrorCode::DigestInvalid,
                &format!("body hashes to {actual}, not {d}"),
            );
        }
        let chunked = match chunk_bytes(&self.store, &body, self.store.chunk_size()) {
            Ok(c) => c,
            Err(e) => return http_error_for(&e),
        };
        if let Err(e) = self.store.pin(&chunked.root) {
            return http_error_for(&e);
        }
        self.known_sizes.insert(d, chunked.total_size);
        self.pending_announce.insert(d);
        self.pending_announce.insert(chunked.root);
        self.pending_announce.extend(chunked.leaves.iter().map(|l| l.cid));
        self.flush_announces(env);
        HttpResponse::new(201)
            .header("Location", format!("/v2/{name}/blobs/{d}"))
            .header(HDR_DIGEST, d.to_string())
    }

    fn put_manifest(&mut self, env: &mut dyn Env, name: &str, reference: &str, body: Bytes) -> HttpResponse {
        let reference = match Reference::parse(reference) {
            Ok(r) => r,
            Err(e) => return HttpResponse::error(400, ErrorCode::TagInvalid, &e.to_string()),
        };
        let manifest = match ImageManifest::parse(body.clone()) {
            Ok(m) => m,
            Err(e) => return HttpResponse::error(400, ErrorCode::ManifestInvalid, &e.to_string()),
        };
        let d = manifest.digest();
        if let Reference::Digest(want) = &reference {
            if *want != d {
                return HttpResponse::error(
                    400,
                    ErrorCode::DigestInvalid,
                    &format!("manifest hashes to {d}, not {want}"),
                );
            }
        }
        if let Some(missing) = manifest.blobs().find(|b| !blob_complete(&self.store, &b.digest)) {
            return HttpResponse::error(
                400,
                ErrorCode::BlobUnknown,
                &format!("blob {} has not been pushed", missing.digest),
            );
        }
        let m = match chunk_bytes(&self.store, &body, self.store.chunk_size()) {
            Ok(m) => m,
            Err(e) => return http_error_for(&e),
        };
        let mut roots = vec![m.root];
        roots.extend(
            manifest
                .blobs()
                .filter_map(|b| self.store.resolve_digest(&b.digest)),
        );
        let tag = match &reference {
            Reference::Tag(t) => Some(t.as_str()),
            Reference::Digest(_) => None,
        };
        if let Err(e) = self.record_image(env, name, tag, manifest, &roots) {
            return http_error_for(&e);
        }
        info!("{} accepted {name}:{reference} as {}", self.me.addr, d.short());
        HttpResponse::new(201)
            .header("Location", format!("/v2/{name}/manifests/{d}"))
            .header(HDR_DIGEST, d.to_string())
    }

    /// Records an image built directly into this node's store, as a push
    /// through the gateway would.
    pub fn publish_image(&mut self, env: &mut dyn Env, name: &str, tag: &str, image: &BuiltImage) -> Result<(), CasError> {
        self.record_image(env, name, Some(tag), image.manifest.clone(), &image.roots())
    }

    fn record_image(
        &mut self,
        env: &mut dyn Env,
        name: &str,
        tag: Option<&str>,
        manifest: ImageManifest,
        roots: &[ContentId],
    ) -> Result<(), CasError> {
        for r in roots {
            self.store.pin(r)?;
            self.pending_announce.insert(*r);
            if let Some((d, _)) = self.store.root_info(r) {
                self.pending_announce.insert(d);
            }
        }
        let d = manifest.digest();
        self.remember_manifest(d, manifest);
        self.images_pinned.insert(d);
        if self.cfg.replication {
            self.replica.pin(d, self.cfg.factor);
        }
        if let Some(t) = tag {
            self.replica.set_tag(name, t, d);
        }
        self.broadcast_pinset(env);
        self.flush_announces(env);
        self.arm_tick(env);
        Ok(())
    }
}
