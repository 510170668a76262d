use serde::{Deserialize, Serialize};

/// Bytes moved in one round, split by direction and payload kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTraffic {
    pub round: usize,
    pub upload_model: u64,
    pub upload_soft: u64,
    pub download_model: u64,
    pub download_soft: u64,
}

impl RoundTraffic {
    pub fn upload(&self) -> u64 {
        self.upload_model + self.upload_soft
    }

    pub fn download(&self) -> u64 {
        self.download_model + self.download_soft
    }

    pub fn total(&self) -> u64 {
        self.upload() + self.download()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    rounds: Vec<RoundTraffic>,
    cumulative: RoundTraffic,
}

impl CommLedger {
    pub fn record(&mut self, traffic: RoundTraffic) {
        self.cumulative.round = traffic.round;
        self.cumulative.upload_model += traffic.upload_model;
        self.cumulative.upload_soft += traffic.upload_soft;
        self.cumulative.download_model += traffic.download_model;
        self.cumulative.download_soft += traffic.download_soft;
        self.rounds.push(traffic);
    }

    pub fn rounds(&self) -> &[RoundTraffic] {
        &self.rounds
    }

    pub fn cumulative(&self) -> RoundTraffic {
        self.cumulative
    }

    pub fn cumulative_bytes(&self) -> u64 {
        self.cumulative.total()
    }
}
