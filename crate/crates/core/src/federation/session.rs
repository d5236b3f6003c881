//! Message-level driver: the parameter server and its nodes exchanging
//! frames over a [`Channel`], so every bit that crosses the network is
//! encoded, decoded, and charged to the ledger.

use crate::error::{Error, Result};
use crate::mask::PruneMask;
use crate::nn::{ArchSpec, Model};
use crate::scalar::{Precision, Scalar};
use crate::wire::{BandwidthLedger, Channel, Frame, Link, MaskBody, RoundMessage, WeightsBody};

use super::node::{LocalParams, Node};
use super::{fedavg, ParameterServer, Phase};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionSettings {
    /// Precision of weights on the wire.
    pub precision: Precision,
    /// Send masks as changes against the receiver's last mask when smaller.
    pub delta_masks: bool,
    /// Leave pruned groups out of weight messages.
    pub sparse_weights: bool,
}

impl Default for SessionSettings {
    fn default() -> Self {
        SessionSettings {
            precision: Precision::F32,
            delta_masks: false,
            sparse_weights: true,
        }
    }
}

pub struct Federation<T: Scalar> {
    arch: ArchSpec,
    nodes: Vec<Node<T>>,
    /// Global mask as last received by each node.
    node_masks: Vec<PruneMask>,
    server: ParameterServer,
    channel: Channel,
    settings: SessionSettings,
    params: LocalParams,
    round: u32,
}

impl<T: Scalar> Federation<T> {
    pub fn new(
        nodes: Vec<Node<T>>,
        server: ParameterServer,
        channel: Channel,
        settings: SessionSettings,
        params: LocalParams,
    ) -> Result<Self> {
        let first = nodes
            .first()
            .ok_or_else(|| Error::Constraint("a federation needs at least one node".into()))?;
        let arch = first.model().arch().clone();
        if nodes.iter().any(|n| n.model().arch() != &arch) {
            return Err(Error::shape("nodes disagree on the architecture"));
        }
        if server.state().last_masks.len() != nodes.len() {
            return Err(Error::Constraint("server was sized for a different node count".into()));
        }
        server.global_mask().check_layout(&first.model().mask_layout())?;
        let node_masks = vec![server.global_mask().clone(); nodes.len()];
        Ok(Federation {
            arch,
            nodes,
            node_masks,
            server,
            channel,
            settings,
            params,
            round: 0,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn server(&self) -> &ParameterServer {
        &self.server
    }

    pub fn global_mask(&self) -> &PruneMask {
        self.server.global_mask()
    }

    pub fn node_mask(&self, node: usize) -> &PruneMask {
        &self.node_masks[node]
    }

    pub fn params(&self) -> &LocalParams {
        &self.params
    }

    pub fn ledger(&self) -> &BandwidthLedger {
        self.channel.ledger()
    }

    pub fn ledger_mut(&mut self) -> &mut BandwidthLedger {
        self.channel.ledger_mut()
    }

    /// Index stamped on the frames of the current round.
    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn next_round(&mut self) -> u32 {
        self.round += 1;
        self.round
    }

    pub fn phase(&self) -> Phase {
        self.server.state().phase
    }

    pub fn flagged_nodes(&self) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.flagged()).map(Node::id).collect()
    }

    fn mask_body(&self, mask: &PruneMask, reference: &PruneMask) -> Result<MaskBody> {
        if self.settings.delta_masks {
            MaskBody::delta(mask, reference)
        } else {
            Ok(MaskBody::full(mask))
        }
    }

    fn skip<'a>(&self, mask: &'a PruneMask) -> Option<&'a PruneMask> {
        self.settings.sparse_weights.then_some(mask)
    }

    /// Sends the shared initialization `w0` to every node.
    pub fn broadcast_init(&mut self, w0: &Model<T>) -> Result<()> {
        if w0.arch() != &self.arch {
            return Err(Error::shape("initial model has the wrong architecture"));
        }
        let body = WeightsBody::encode(w0, self.settings.precision, None)?;
        let frame = Frame::new(self.round, RoundMessage::InitWeights(body));
        for n in 0..self.nodes.len() {
            self.channel.send(Link::down(n), &frame)?;
            let got = self.channel.recv(Link::down(n))?;
            let RoundMessage::InitWeights(body) = got.message else {
                return Err(unexpected(n, "initial weights"));
            };
            let model = body.decode(&self.arch, self.settings.precision, None)?;
            self.nodes[n].set_model(model)?;
        }
        Ok(())
    }

    /// One pruning round: local train-and-score on every node in parallel,
    /// mask uploads, consensus, and the global mask broadcast.
    pub fn pruning_round(&mut self, increment: f64) -> Result<PruneMask> {
        let round = self.next_round();
        self.pruning_round_inner(increment).map_err(|e| e.in_round(round))
    }

    fn pruning_round_inner(&mut self, increment: f64) -> Result<PruneMask> {
        let params = &self.params;
        let results: Vec<Result<PruneMask>> = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .nodes
                .iter_mut()
                .zip(&self.node_masks)
                .map(|(node, mask)| s.spawn(move || node.node_round(mask, increment, params)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("node thread panicked"))
                .collect()
        });
        let local: Vec<PruneMask> = results.into_iter().collect::<Result<_>>()?;

        let layout = self.server.global_mask().layout();
        let mut uploaded = Vec::with_capacity(local.len());
        for (n, mask) in local.iter().enumerate() {
            let body = self.mask_body(mask, &self.node_masks[n])?;
            let frame = Frame::new(
                self.round,
                RoundMessage::MaskUpload {
                    node: n as u32,
                    mask: body,
                },
            );
            self.channel.send(Link::up(n), &frame)?;
            let got = self.channel.recv(Link::up(n))?;
            let RoundMessage::MaskUpload { node, mask } = got.message else {
                return Err(unexpected(n, "mask upload"));
            };
            if node as usize != n {
                return Err(Error::Transport(format!("mask from node {node} arrived on link {n}")));
            }
            uploaded.push(mask.decode(&layout, Some(self.server.global_mask()))?);
        }

        let previous = self.server.global_mask().clone();
        let next = self.server.aggregate(&uploaded, increment)?;
        let body = self.mask_body(&next, &previous)?;
        self.send_global_mask(body)?;
        Ok(next)
    }

    fn send_global_mask(&mut self, body: MaskBody) -> Result<()> {
        let layout = self.server.global_mask().layout();
        let frame = Frame::new(self.round, RoundMessage::GlobalMask(body));
        for n in 0..self.nodes.len() {
            self.channel.send(Link::down(n), &frame)?;
            let got = self.channel.recv(Link::down(n))?;
            let RoundMessage::GlobalMask(body) = got.message else {
                return Err(unexpected(n, "global mask"));
            };
            self.node_masks[n] = body.decode(&layout, Some(&self.node_masks[n]))?;
        }
        Ok(())
    }

    /// Installs a mask chosen by the server itself and broadcasts it.
    pub fn broadcast_mask(&mut self, mask: &PruneMask) -> Result<()> {
        let previous = self.server.global_mask().clone();
        self.server.commit(mask.clone())?;
        let body = self.mask_body(mask, &previous)?;
        self.send_global_mask(body)
    }

    /// Masked local training on every node in parallel.
    pub fn train_nodes(&mut self) -> Result<()> {
        let params = &self.params;
        let results: Vec<Result<bool>> = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .nodes
                .iter_mut()
                .zip(&self.node_masks)
                .map(|(node, mask)| s.spawn(move || node.train(mask, params)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("node thread panicked"))
                .collect()
        });
        for r in results {
            r?;
        }
        Ok(())
    }

    /// Every node uploads its weights; returns the models as decoded by the server.
    pub fn upload_weights(&mut self) -> Result<Vec<Model<T>>> {
        let mut models = Vec::with_capacity(self.nodes.len());
        for n in 0..self.nodes.len() {
            let body = WeightsBody::encode(
                self.nodes[n].model(),
                self.settings.precision,
                self.skip(&self.node_masks[n]),
            )?;
            let frame = Frame::new(
                self.round,
                RoundMessage::WeightUpload {
                    node: n as u32,
                    weights: body,
                },
            );
            self.channel.send(Link::up(n), &frame)?;
            let got = self.channel.recv(Link::up(n))?;
            let RoundMessage::WeightUpload { node, weights } = got.message else {
                return Err(unexpected(n, "weight upload"));
            };
            if node as usize != n {
                return Err(Error::Transport(format!(
                    "weights from node {node} arrived on link {n}"
                )));
            }
            let mask = self.server.global_mask();
            models.push(weights.decode(&self.arch, self.settings.precision, self.skip(mask))?);
        }
        Ok(models)
    }

    /// Sends the global model to every node, which adopts it.
    pub fn broadcast_weights(&mut self, model: &Model<T>) -> Result<()> {
        let body = WeightsBody::encode(model, self.settings.precision, self.skip(self.server.global_mask()))?;
        let frame = Frame::new(self.round, RoundMessage::GlobalWeights(body));
        for n in 0..self.nodes.len() {
            self.channel.send(Link::down(n), &frame)?;
            let got = self.channel.recv(Link::down(n))?;
            let RoundMessage::GlobalWeights(body) = got.message else {
                return Err(unexpected(n, "global weights"));
            };
            let decoded = body.decode(&self.arch, self.settings.precision, self.skip(&self.node_masks[n]))?;
            self.nodes[n].set_model(decoded)?;
        }
        Ok(())
    }

    /// One round of masked federated averaging: train, upload, average,
    /// broadcast. Returns the new global model.
    pub fn fl_round(&mut self) -> Result<Model<T>> {
        let round = self.next_round();
        self.fl_round_inner().map_err(|e| e.in_round(round))
    }

    fn fl_round_inner(&mut self) -> Result<Model<T>> {
        self.train_nodes()?;
        let uploads = self.upload_weights()?;
        let mut global = fedavg(&uploads)?;
        global.mask_in_place(self.server.global_mask())?;
        self.broadcast_weights(&global)?;
        Ok(global)
    }

    /// Switches to plain federated averaging under the final mask. With
    /// `rounds = 0` the nodes upload once and the average is returned
    /// without further training.
    pub fn final_fl_phase(
        &mut self,
        rounds: usize,
        mut on_round: impl FnMut(&Self, &Model<T>) -> Result<()>,
    ) -> Result<Model<T>> {
        self.server.enter_final_phase()?;
        if rounds == 0 {
            let round = self.next_round();
            let uploads = self.upload_weights().map_err(|e| e.in_round(round))?;
            let mut global = fedavg(&uploads)?;
            global.mask_in_place(self.server.global_mask())?;
            on_round(self, &global)?;
            return Ok(global);
        }
        let mut global = None;
        for _ in 0..rounds {
            let model = self.fl_round()?;
            on_round(self, &model)?;
            global = Some(model);
        }
        Ok(global.expect("at least one round"))
    }

    /// Average of the nodes' current models under the global mask, computed
    /// in memory for evaluation only; nothing is sent or charged.
    pub fn peek_average(&self) -> Result<Model<T>> {
        let models: Vec<Model<T>> = self.nodes.iter().map(|n| n.model().clone()).collect();
        let mut avg = fedavg(&models)?;
        avg.mask_in_place(self.server.global_mask())?;
        Ok(avg)
    }
}

fn unexpected(node: usize, wanted: &str) -> Error {
    Error::Transport(format!("node {node}: expected {wanted}"))
}
