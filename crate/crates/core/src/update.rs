//! Client-to-server update: the parameter delta against the broadcast model
//! plus the client's post-training BN running statistics.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{flatten, BnStats, FlatVector, ModelState};
use crate::scalar::Scalar;
use crate::ClientId;

/// One uploaded update: `delta = local - broadcast` over learnable params.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ClientUpdate<S: Scalar> {
    pub client_id: ClientId,
    pub delta: FlatVector<S>,
    pub uploaded_bn_stats: BnStats<S>,
}

impl<S: Scalar> ClientUpdate<S> {
    /// Form the update a client uploads after local training.
    pub fn from_training(
        client_id: ClientId,
        broadcast: &ModelState<S>,
        trained: &ModelState<S>,
    ) -> Result<Self> {
        let delta = flatten(trained).sub(&flatten(broadcast))?;
        Ok(ClientUpdate {
            client_id,
            delta,
            uploaded_bn_stats: trained.bn_stats.clone(),
        })
    }
}
