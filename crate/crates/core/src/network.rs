//! Link model: per-network latency classes, rational message loss and
//! partitions.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::ids::{GroupId, PeerId};
use crate::rng::SimRng;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetworkError {
    #[error("unknown peer {0}")]
    UnknownPeer(PeerId),
    #[error("peer {0} appears in more than one partition set")]
    OverlappingSets(PeerId),
}

/// Base latencies for one named network, in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinkLatencies {
    pub intra_subgroup: u64,
    pub inter_subgroup: u64,
    pub inter_network: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinkClass {
    IntraSubgroup,
    InterSubgroup,
    InterNetwork,
}

/// Loss probability as an exact rational in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossRate {
    pub num: u64,
    pub den: u64,
}

impl LossRate {
    pub const NONE: LossRate = LossRate { num: 0, den: 1 };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropReason {
    Partition,
    Loss,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::Partition => "partition",
            DropReason::Loss => "loss",
        }
    }
}

/// Outcome of offering a message to the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Delivery {
    After(u64),
    Dropped(DropReason),
}

#[derive(Clone, Debug)]
struct Attachment {
    network: usize,
    cluster: Option<GroupId>,
}

#[derive(Clone, Debug)]
pub struct NetworkModel {
    networks: Vec<LinkLatencies>,
    peers: BTreeMap<PeerId, Attachment>,
    partitions: Vec<BTreeSet<PeerId>>,
    loss: LossRate,
    jitter_max: u64,
}

impl NetworkModel {
    pub fn new(networks: Vec<LinkLatencies>, loss: LossRate, jitter_max: u64) -> Self {
        Self {
            networks,
            peers: BTreeMap::new(),
            partitions: Vec::new(),
            loss,
            jitter_max,
        }
    }

    pub fn attach(&mut self, peer: PeerId, network: usize) {
        assert!(network < self.networks.len(), "network index out of range");
        self.peers.insert(
            peer,
            Attachment {
                network,
                cluster: None,
            },
        );
    }

    pub fn contains(&self, peer: PeerId) -> bool {
        self.peers.contains_key(&peer)
    }

    /// Records the worker subgroup a peer currently belongs to; peers sharing a
    /// cluster on one network talk over the intra-subgroup link class.
    pub fn set_cluster(&mut self, peer: PeerId, cluster: Option<GroupId>) {
        if let Some(a) = self.peers.get_mut(&peer) {
            a.cluster = cluster;
        }
    }

    pub fn set_loss(&mut self, loss: LossRate) {
        self.loss = loss;
    }

    /// Replaces the partition sets atomically. An empty list heals everything.
    pub fn set_partition(&mut self, sets: Vec<BTreeSet<PeerId>>) -> Result<(), NetworkError> {
        let mut seen = BTreeSet::new();
        for set in &sets {
            for p in set {
                if !seen.insert(*p) {
                    return Err(NetworkError::OverlappingSets(*p));
                }
            }
        }
        self.partitions = sets.into_iter().filter(|s| !s.is_empty()).collect();
        Ok(())
    }

    pub fn partitions(&self) -> &[BTreeSet<PeerId>] {
        &self.partitions
    }

    /// Component index of a peer. Peers outside every listed set share the
    /// implicit component `partitions.len()`.
    pub fn component_of(&self, peer: PeerId) -> usize {
        self.partitions
            .iter()
            .position(|s| s.contains(&peer))
            .unwrap_or(self.partitions.len())
    }

    pub fn connected(&self, a: PeerId, b: PeerId) -> bool {
        self.component_of(a) == self.component_of(b)
    }

    pub fn link_class(&self, from: PeerId, to: PeerId) -> Result<LinkClass, NetworkError> {
        let a = self
            .peers
            .get(&from)
            .ok_or(NetworkError::UnknownPeer(from))?;
        let b = self.peers.get(&to).ok_or(NetworkError::UnknownPeer(to))?;
        Ok(if a.network != b.network {
            LinkClass::InterNetwork
        } else if a.cluster.is_some() && a.cluster == b.cluster {
            LinkClass::IntraSubgroup
        } else {
            LinkClass::InterSubgroup
        })
    }

    fn base_latency(&self, from: PeerId, to: PeerId) -> Result<u64, NetworkError> {
        let class = self.link_class(from, to)?;
        let na = &self.networks[self.peers[&from].network];
        let nb = &self.networks[self.peers[&to].network];
        Ok(match class {
            LinkClass::IntraSubgroup => na.intra_subgroup,
            LinkClass::InterSubgroup => na.inter_subgroup,
            LinkClass::InterNetwork => na.inter_network.max(nb.inter_network),
        })
    }

    /// Decides the fate of one message. The partition check happens here, at
    /// send time; messages already in flight are unaffected by later splits.
    pub fn offer(
        &self,
        from: PeerId,
        to: PeerId,
        rng: &mut SimRng,
    ) -> Result<Delivery, NetworkError> {
        let base = self.base_latency(from, to)?;
        if !self.connected(from, to) {
            return Ok(Delivery::Dropped(DropReason::Partition));
        }
        if rng.chance(self.loss.num, self.loss.den) {
            return Ok(Delivery::Dropped(DropReason::Loss));
        }
        let jitter = if self.jitter_max > 0 {
            rng.range_inclusive(0, self.jitter_max)
        } else {
            0
        };
        Ok(Delivery::After(base + jitter))
    }
}
