//! Classic two-phase replicated register, kept as a roundtrip comparator.
//!
//! A write reads the max register for the largest timestamp, then writes
//! its value one counter above it. A read is a max-register read.

use alloc::rc::Rc;

use crate::fabric::{ClientId, Fabric};
use crate::maxreg::{MaxRegister, NodeRegister};
use crate::value::{Flag, MAX_COUNTER, MValue, Timestamp};

#[derive(Clone, Debug)]
pub struct AbdWrite {
    pub ts: Timestamp,
    pub roundtrips: u32,
    /// The register held the deletion sentinel; nothing was written.
    pub deleted: bool,
}

#[derive(Clone, Debug)]
pub struct AbdRead {
    pub value: MValue,
    pub roundtrips: u32,
}

pub struct Abd<R: NodeRegister<Value = MValue>> {
    fabric: Fabric,
    client: ClientId,
    m: Rc<MaxRegister<R>>,
}

impl<R: NodeRegister<Value = MValue>> Abd<R> {
    pub fn new(fabric: Fabric, client: ClientId, m: Rc<MaxRegister<R>>) -> Self {
        Abd { fabric, client, m }
    }

    pub async fn write(&self, bytes: Rc<[u8]>) -> AbdWrite {
        let op = self.fabric.next_op_id();
        let r = self.m.weak_read(op).await;
        if r.value.is_tombstone() {
            return AbdWrite { ts: r.value.ts(), roundtrips: r.roundtrips, deleted: true };
        }
        let counter = r.value.ts().counter;
        assert!(counter < MAX_COUNTER, "timestamp counter exhausted");
        let ts = Timestamp::new(counter + 1, self.client.0);
        let w = self.m.write(MValue::new(ts, Flag::Verified, bytes), op).await;
        AbdWrite { ts, roundtrips: r.roundtrips + w.roundtrips, deleted: false }
    }

    pub async fn read(&self) -> AbdRead {
        let op = self.fabric.next_op_id();
        let r = self.m.read(op).await;
        let mut roundtrips = r.roundtrips;
        let mut value = r.value;
        loop {
            match self.m.resolve(value.clone()).await {
                Some((v, n)) => {
                    roundtrips += n;
                    return AbdRead { value: v, roundtrips };
                }
                None => {
                    // holders unreachable; read again
                    let r = self.m.read(op).await;
                    roundtrips += r.roundtrips + 1;
                    value = r.value;
                }
            }
        }
    }
}
