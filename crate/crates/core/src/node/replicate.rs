use log::{debug, info, warn};

use super::{Env, FetchResult, Job, Node, NodeEvent};
use crate::cid::ContentId;
use crate::image::{blob_complete, ImageManifest};
use crate::peer::PeerId;
use crate::replication::PinsetState;
use crate::wire::Message;

impl Node {
    pub(super) fn gossip_targets(&self) -> impl Iterator<Item = &String> {
        self.cfg
            .members
            .iter()
            .filter(move |m| **m != self.me.addr && Some(*m) != self.cfg.origin.as_ref())
    }

    fn is_site_member(&self, addr: &str) -> bool {
        Some(addr) != self.cfg.origin.as_deref() && self.replica.is_member(&PeerId::from_addr(addr))
    }

    /// What `addr` is sent: the full state for members, tags alone for anyone
    /// else, whose pins would be discarded anyway.
    fn view_for(&self, addr: &str, state: &PinsetState) -> PinsetState {
        if self.is_site_member(addr) {
            state.clone()
        } else {
            PinsetState {
                pins: Default::default(),
                tags: state.tags.clone(),
            }
        }
    }

    pub(super) fn gossip(&mut self, env: &mut dyn Env) {
        if !self.cfg.replication {
            return;
        }
        let targets: Vec<String> = self.gossip_targets().cloned().collect();
        if targets.is_empty() {
            return;
        }
        let to = &targets[(env.random() % targets.len() as u64) as usize];
        env.send(to, Message::PinsetSync(self.replica.state().clone()));
    }

    pub(super) fn broadcast_pinset(&mut self, env: &mut dyn Env) {
        let targets: Vec<String> = self.gossip_targets().cloned().collect();
        for t in targets {
            env.send(&t, Message::PinsetSync(self.replica.state().clone()));
        }
    }

    /// Asks members and the origin for their tags.
    pub(super) fn ask_for_tags(&mut self, env: &mut dyn Env) {
        self.broadcast_pinset(env);
        if let Some(o) = self.cfg.origin.clone() {
            let v = self.view_for(&o, self.replica.state());
            env.send(&o, Message::PinsetSync(v));
        }
    }

    /// Seeds the pinset from a saved copy, for example after a restart.
    pub fn restore_pinset(&mut self, state: &PinsetState) {
        self.replica.merge(state);
    }

    pub(super) fn on_pinset(&mut self, env: &mut dyn Env, from: &str, remote: PinsetState) {
        let theirs = self.view_for(from, &remote);
        let outcome = self.replica.merge(&theirs);
        let ours = self.view_for(from, self.replica.state());
        if ours != theirs {
            env.send(from, Message::PinsetSync(ours));
        }
        if outcome.tags_changed > 0 {
            self.tags_changed(env);
        }
        if !outcome.new_pins.is_empty() {
            debug!("{} learned {} pins from {from}", self.me.addr, outcome.new_pins.len());
            self.reconcile_replication(env);
        }
    }

    /// Starts jobs for assigned images that are not held yet.
    pub(super) fn reconcile_replication(&mut self, env: &mut dyn Env) {
        if !self.cfg.replication || !self.cfg.p2p {
            return;
        }
        for d in self.replica.assigned_to_me() {
            if self.images_pinned.contains(&d) || self.replicating.contains(&d) {
                continue;
            }
            if self.pin_image_locally(&d) {
                self.images_pinned.insert(d);
                env.emit(NodeEvent::ImagePinned { manifest: d });
                continue;
            }
            info!("{} replicating {}", self.me.addr, d.short());
            self.replicating.insert(d);
            let job = self.new_job(Job::Replicate {
                manifest: d,
                remaining: None,
            });
            self.fetch(env, d, Some(job));
        }
    }

    pub(super) fn continue_replication(
        &mut self,
        env: &mut dyn Env,
        manifest: ContentId,
        remaining: Option<Vec<ContentId>>,
        result: FetchResult,
    ) {
        if let FetchResult::Failed(why) = result {
            warn!("{} replication of {} failed: {why:?}", self.me.addr, manifest.short());
            self.replicating.remove(&manifest);
            return;
        }
        let mut remaining = match remaining {
            Some(r) => r,
            None => match self.load_manifest(&manifest) {
                Some(m) => {
                    let mut v: Vec<ContentId> = m
                        .blobs()
                        .map(|b| b.digest)
                        .filter(|d| !blob_complete(&self.store, d))
                        .collect();
                    v.dedup();
                    Self::shuffle(env, &mut v);
                    v
                }
                None => {
                    warn!("replicated manifest {} does not parse", manifest.short());
                    self.replicating.remove(&manifest);
                    return;
                }
            },
        };
        match remaining.pop() {
            Some(next) => {
                let job = self.new_job(Job::Replicate {
                    manifest,
                    remaining: Some(remaining),
                });
                self.fetch(env, next, Some(job));
            }
            None => {
                self.replicating.remove(&manifest);
                if self.pin_image_locally(&manifest) {
                    self.images_pinned.insert(manifest);
                    env.emit(NodeEvent::ImagePinned { manifest });
                }
            }
        }
    }

    fn load_manifest(&mut self, d: &ContentId) -> Option<ImageManifest> {
        if let Some(m) = self.manifests.get(d) {
            return Some(m.clone());
        }
        let root = self.store.resolve_digest(d)?;
        let bytes = self.store.assemble(&root).ok()?;
        let m = ImageManifest::parse(bytes).ok()?;
        self.remember_manifest(*d, m.clone());
        Some(m)
    }

    /// Pins the manifest and every blob it names, if all are complete.
    fn pin_image_locally(&mut self, d: &ContentId) -> bool {
        if !blob_complete(&self.store, d) {
            return false;
        }
        let Some(m) = self.load_manifest(d) else { return false };
        let mut digests = vec![*d];
        digests.extend(m.blobs().map(|b| b.digest));
        if !digests.iter().all(|x| blob_complete(&self.store, x)) {
            return false;
        }
        for x in digests {
            let root = self.store.resolve_digest(&x).expect("complete blob has a root");
            if let Err(e) = self.store.pin(&root) {
                warn!("cannot pin {}: {e}", x.short());
                return false;
            }
        }
        true
    }

    /// Pins images that became complete through ordinary pulls and records
    /// them in the pinset.
    pub(super) fn check_auto_pin(&mut self, env: &mut dyn Env) {
        if !self.cfg.replication {
            return;
        }
        let candidates: Vec<ContentId> = self
            .manifests
            .keys()
            .filter(|d| !self.images_pinned.contains(d) && !self.replicating.contains(d))
            .copied()
            .collect();
        let mut changed = false;
        for d in candidates {
            if !self.pin_image_locally(&d) {
                continue;
            }
            self.images_pinned.insert(d);
            env.emit(NodeEvent::ImagePinned { manifest: d });
            if self.replica.state().factor_for(&d).is_none() {
                self.replica.pin(d, self.cfg.factor);
                changed = true;
            }
        }
        if changed {
            self.broadcast_pinset(env);
            self.reconcile_replication(env);
        }
    }

    /// Re-learns images whose manifests are pinned in the store.
    pub(super) fn restore_pinned_images(&mut self) {
        for root in self.store.pinned() {
            let Some((d, _)) = self.store.root_info(&root) else { continue };
            let Ok(bytes) = self.store.assemble(&root) else { continue };
            let Ok(m) = ImageManifest::parse(bytes) else { continue };
            let complete = m.blobs().all(|b| blob_complete(&self.store, &b.digest));
            self.remember_manifest(d, m);
            if complete {
                self.images_pinned.insert(d);
            }
        }
    }
}
