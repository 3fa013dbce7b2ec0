use std::sync::Mutex;

/// Who touched a piece of data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Party {
    Server,
    Client(usize),
    /// The simulator's evaluation harness, outside the federation.
    Evaluator,
}

/// What was touched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Access {
    ClientTrain { owner: usize },
    ClientTest { owner: usize },
    /// The pooled test splits used for cloud evaluation.
    CloudTest,
    Ses,
    Upload { client: usize },
}

pub trait AuditSink: Send + Sync {
    fn record(&self, by: Party, access: Access);
}

/// Keeps every event in memory.
#[derive(Debug, Default)]
pub struct AuditLog {
    events: Mutex<Vec<(Party, Access)>>,
}

impl AuditLog {
    pub fn events(&self) -> Vec<(Party, Access)> {
        self.events.lock().expect("audit lock").clone()
    }

    /// Events in which a party read private client data it does not own.
    pub fn violations(&self) -> Vec<(Party, Access)> {
        self.events()
            .into_iter()
            .filter(|(by, access)| match (by, access) {
                (Party::Client(i), Access::ClientTrain { owner } | Access::ClientTest { owner }) => i != owner,
                (Party::Server, Access::ClientTrain { .. } | Access::ClientTest { .. } | Access::CloudTest) => true,
                (Party::Client(_), Access::CloudTest | Access::Upload { .. }) => true,
                (Party::Evaluator, Access::ClientTrain { .. }) => true,
                _ => false,
            })
            .collect()
    }
}

impl AuditSink for AuditLog {
    fn record(&self, by: Party, access: Access) {
        self.events.lock().expect("audit lock").push((by, access));
    }
}
