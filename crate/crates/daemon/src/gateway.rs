//! Serves the node's registry API over HTTP/1.1.

use std::io;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::State;
use axum::http::{HeaderName, HeaderValue, Method as HttpMethod, Response, StatusCode, Uri};
use axum::Router;
use bytes::Bytes;
use edgepier_core::cas::Store;
use edgepier_core::gateway::{self, ErrorCode, HttpRequest, HttpResponse, Method};
use futures::stream::{self, StreamExt};
use log::warn;
use tokio::sync::mpsc::UnboundedSender;
use tokio::sync::oneshot;

use crate::runtime::Cmd;

#[derive(Clone)]
struct Gateway {
    cmds: UnboundedSender<Cmd>,
    store: Arc<Store>,
}

pub(crate) fn router(cmds: UnboundedSender<Cmd>, store: Arc<Store>) -> Router {
    Router::new()
        .fallback(handle)
        .layer(axum::extract::DefaultBodyLimit::disable())
        .with_state(Gateway { cmds, store })
}

async fn handle(State(gw): State<Gateway>, method: HttpMethod, uri: Uri, body: Bytes) -> Response<Body> {
    let mut req = HttpRequest::new(Method::parse(method.as_str()), uri.path());
    req.query = uri.query().map(HttpRequest::parse_query).unwrap_or_default();
    req.body = body;
    let (tx, rx) = oneshot::channel();
    let resp = if gw.cmds.send(Cmd::Http { req, reply: tx }).is_err() {
        HttpResponse::error(503, ErrorCode::Unavailable, "node is shutting down")
    } else {
        rx.await
            .unwrap_or_else(|_| HttpResponse::error(503, ErrorCode::Unavailable, "node is shutting down"))
    };
    convert(&gw.store, resp)
}

fn convert(store: &Arc<Store>, resp: HttpResponse) -> Response<Body> {
    let body = match resp.body {
        gateway::Body::Empty => Body::empty(),
        gateway::Body::Bytes(b) => Body::from(b),
        gateway::Body::Blob { root, .. } => match store.walk(&root) {
            Ok(walk) => {
                let store = store.clone();
                Body::from_stream(stream::iter(walk.leaves).map(move |l| {
                    store.get_block(&l.cid).map_err(|e| {
                        warn!("aborting blob {}: {e}", root.short());
                        io::Error::other(e)
                    })
                }))
            }
            Err(e) => {
                let err = edgepier_core::node::http_error_for(&e);
                return convert(store, err);
            }
        },
    };
    let mut out = Response::new(body);
    *out.status_mut() = StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    for (k, v) in resp.headers {
        match (HeaderName::try_from(k.as_str()), HeaderValue::try_from(v.as_str())) {
            (Ok(k), Ok(v)) => {
                out.headers_mut().insert(k, v);
            }
            _ => warn!("skipping unrepresentable header {k}"),
        }
    }
    out
}
