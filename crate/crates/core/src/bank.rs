//! Accounts as chains. A transfer is one block appended atomically to the
//! payer's and the payee's chains, so a double spend becomes a slot
//! conflict that consensus refuses.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::block::Block;
use crate::chains::{ChainHead, VerifiedChain};
use crate::codec::{Decode, DecodeError, Encode, Reader};
use crate::consensus::{InstanceId, ProofOfConsensus};
use crate::crypto::{Hash, ServerId};
use crate::fern::{AppValidator, ChainHistory, Fern};
use crate::policy::Label;
use crate::sim::SimConfig;
use crate::world::{Cluster, World, WorldError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransferRecord {
    pub from: Hash,
    pub to: Hash,
    pub amount: u64,
    pub memo: Vec<u8>,
}

crate::impl_codec_struct!(TransferRecord {
    from,
    to,
    amount,
    memo
});

/// What an account chain's payloads say.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BankRecord {
    Open {
        owner: String,
        initial: u64,
        nonce: u64,
    },
    Transfer(TransferRecord),
}

impl Encode for BankRecord {
    fn encode_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(b"bank");
        match self {
            BankRecord::Open {
                owner,
                initial,
                nonce,
            } => {
                out.push(0);
                (owner, initial, nonce).encode_to(out);
            }
            BankRecord::Transfer(t) => {
                out.push(1);
                t.encode_to(out);
            }
        }
    }
}

impl Decode for BankRecord {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        if r.take(4)? != b"bank" {
            return Err(DecodeError::Invalid("not a bank record".into()));
        }
        Ok(match r.u8()? {
            0 => {
                let (owner, initial, nonce) = <(String, u64, u64)>::decode_from(r)?;
                BankRecord::Open {
                    owner,
                    initial,
                    nonce,
                }
            }
            1 => BankRecord::Transfer(TransferRecord::decode_from(r)?),
            tag => {
                return Err(DecodeError::UnknownTag {
                    what: "bank record",
                    tag,
                })
            }
        })
    }
}

/// The bank record carried by a block, if it has one.
pub fn record_of(block: &Block) -> Option<BankRecord> {
    block.payloads().find_map(|p| BankRecord::decode(p).ok())
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BankError {
    #[error("insufficient funds: balance {available}, requested {requested}")]
    InsufficientFunds { available: u64, requested: u64 },
    #[error("another transfer took the slot")]
    Conflict(Box<ProofOfConsensus>),
    #[error("transfer amount must be positive")]
    ZeroAmount,
    #[error("cannot transfer to the same account")]
    SameAccount,
    #[error("unknown account {0}")]
    UnknownAccount(String),
    #[error("account chain does not verify: {0}")]
    UnverifiedChain(String),
    #[error(transparent)]
    World(WorldError),
}

impl From<WorldError> for BankError {
    fn from(e: WorldError) -> Self {
        match e {
            WorldError::Lost(p) => BankError::Conflict(p),
            other => BankError::World(other),
        }
    }
}

/// Balance after each block of the account, in slot order. Fails on a
/// history that opens wrongly or goes negative.
pub fn balance_history(root: &Hash, blocks: &[&Block]) -> Result<Vec<u64>, BankError> {
    let unverified = |s: &str| BankError::UnverifiedChain(s.to_string());
    let (first, rest) = blocks
        .split_first()
        .ok_or_else(|| unverified("empty chain"))?;
    let Some(BankRecord::Open { initial, .. }) = record_of(first) else {
        return Err(unverified("root does not open an account"));
    };
    let mut bal = initial;
    let mut out = vec![bal];
    for b in rest {
        if let Some(BankRecord::Transfer(t)) = record_of(b) {
            if t.to == *root {
                bal = bal
                    .checked_add(t.amount)
                    .ok_or_else(|| unverified("balance overflow"))?;
            }
            if t.from == *root {
                bal = bal
                    .checked_sub(t.amount)
                    .ok_or_else(|| unverified("balance goes negative"))?;
            }
        }
        out.push(bal);
    }
    Ok(out)
}

/// Initial balance plus incoming minus outgoing over the decided blocks.
pub fn balance(chain: &VerifiedChain) -> Result<u64, BankError> {
    let blocks: Vec<&Block> = chain.blocks.iter().map(|e| &e.block).collect();
    Ok(*balance_history(&chain.root, &blocks)?
        .last()
        .expect("root entry"))
}

pub fn transfers(chain: &VerifiedChain) -> Vec<(u64, TransferRecord)> {
    chain
        .blocks
        .iter()
        .filter_map(|e| match record_of(&e.block) {
            Some(BankRecord::Transfer(t)) => Some((e.slot, t)),
            _ => None,
        })
        .collect()
}

/// Integrity-server check that a transfer never overdraws the payer, as
/// far as the server's own decided history shows.
pub struct BankValidator;

impl AppValidator for BankValidator {
    fn validate(
        &self,
        block: &Block,
        instance: &InstanceId,
        history: &dyn ChainHistory,
    ) -> Result<(), String> {
        let Some(rec) = record_of(block) else {
            return Ok(());
        };
        let BankRecord::Transfer(t) = rec else {
            return Err("an account can only be opened by a chain root".into());
        };
        if t.amount == 0 || t.from == t.to {
            return Err("malformed transfer".into());
        }
        let touched: Vec<Hash> = instance.claims().iter().map(|c| c.chain).collect();
        if touched.len() != 2 || !touched.contains(&t.from) || !touched.contains(&t.to) {
            return Err("transfer must be appended to exactly the payer and payee".into());
        }
        let Some(root) = history.root_block(&t.from) else {
            return Ok(());
        };
        let decided = history.decided_blocks(&t.from);
        let Some(decided) = decided.into_iter().collect::<Option<Vec<&Block>>>() else {
            return Ok(());
        };
        let mut chain = vec![root];
        chain.extend(decided);
        let bal = balance_history(&t.from, &chain).map_err(|e| e.to_string())?;
        let available = *bal.last().expect("root entry");
        if available < t.amount {
            return Err(format!(
                "overdraft: balance {available}, transfer {}",
                t.amount
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Account {
    pub owner: String,
    pub head: ChainHead,
}

/// A simulated bank: one cluster serving every account chain.
pub struct Bank {
    pub world: World,
    pub cluster: Cluster,
    accounts: BTreeMap<Hash, Account>,
    names: BTreeMap<String, Hash>,
    nonce: u64,
}

impl Bank {
    pub fn new(config: SimConfig) -> Result<Self, BankError> {
        let mut world = World::new(config)?;
        let cluster = world.add_cluster_with("bank", 4, 4, 3, |f: Fern| {
            f.with_validator(Box::new(BankValidator))
        });
        world.sim.check_faults().map_err(WorldError::from)?;
        Ok(Bank {
            world,
            cluster,
            accounts: BTreeMap::new(),
            names: BTreeMap::new(),
            nonce: 0,
        })
    }

    pub fn label(&self) -> &Label {
        &self.cluster.label
    }

    pub fn open_account(&mut self, owner: &str, initial: u64) -> Result<Hash, BankError> {
        let label = self.cluster.label.clone();
        self.open_account_with(owner, &label, initial)
    }

    pub fn open_account_with(
        &mut self,
        owner: &str,
        label: &Label,
        initial: u64,
    ) -> Result<Hash, BankError> {
        self.nonce += 1;
        let rec = BankRecord::Open {
            owner: owner.to_string(),
            initial,
            nonce: self.nonce,
        };
        let head = self.world.mint(label, vec![rec.encode()])?;
        let root = head.chain();
        self.accounts.insert(
            root,
            Account {
                owner: owner.to_string(),
                head,
            },
        );
        self.names.insert(owner.to_string(), root);
        Ok(root)
    }

    pub fn account(&self, id: &Hash) -> Option<&Account> {
        self.accounts.get(id)
    }

    pub fn by_owner(&self, owner: &str) -> Result<Hash, BankError> {
        self.names
            .get(owner)
            .copied()
            .ok_or_else(|| BankError::UnknownAccount(owner.to_string()))
    }

    pub fn accounts(&self) -> impl Iterator<Item = (&Hash, &Account)> {
        self.accounts.iter()
    }

    fn head(&self, id: &Hash) -> Result<&ChainHead, BankError> {
        self.accounts
            .get(id)
            .map(|a| &a.head)
            .ok_or_else(|| BankError::UnknownAccount(id.short()))
    }

    pub fn verified(&self, id: &Hash) -> Result<VerifiedChain, BankError> {
        self.world
            .verify(self.head(id)?)
            .map_err(|e| BankError::UnverifiedChain(e.to_string()))
    }

    pub fn balance(&self, id: &Hash) -> Result<u64, BankError> {
        balance(&self.verified(id)?)
    }

    pub fn history(&self, id: &Hash) -> Result<Vec<(u64, TransferRecord)>, BankError> {
        Ok(transfers(&self.verified(id)?))
    }

    fn transfer_payload(
        &self,
        from: Hash,
        to: Hash,
        amount: u64,
        memo: &[u8],
    ) -> Result<Vec<Vec<u8>>, BankError> {
        if amount == 0 {
            return Err(BankError::ZeroAmount);
        }
        if from == to {
            return Err(BankError::SameAccount);
        }
        let available = self.balance(&from)?;
        if available < amount {
            return Err(BankError::InsufficientFunds {
                available,
                requested: amount,
            });
        }
        let rec = BankRecord::Transfer(TransferRecord {
            from,
            to,
            amount,
            memo: memo.to_vec(),
        });
        Ok(vec![rec.encode()])
    }

    pub fn transfer(
        &mut self,
        from: Hash,
        to: Hash,
        amount: u64,
        memo: &[u8],
    ) -> Result<Block, BankError> {
        let payload = self.transfer_payload(from, to, amount, memo)?;
        self.head(&to)?;
        let mut a = self.accounts.remove(&from).expect("checked by balance");
        let mut b = self.accounts.remove(&to).expect("checked above");
        let r = self.world.append(&mut [&mut a.head, &mut b.head], payload);
        self.accounts.insert(from, a);
        self.accounts.insert(to, b);
        Ok(r?)
    }

    /// Submits several transfers at once from independent clients, all
    /// built against the current heads. Returns which ones committed.
    pub fn race(
        &mut self,
        transfers: &[(Hash, Hash, u64)],
    ) -> Result<Vec<Result<Block, BankError>>, BankError> {
        let mut attempts = Vec::new();
        for (from, to, amount) in transfers {
            let payload = self.transfer_payload(*from, *to, *amount, b"race")?;
            attempts.push((
                vec![self.head(from)?.clone(), self.head(to)?.clone()],
                payload,
            ));
        }
        let results = self.world.race(attempts)?;
        let mut out = Vec::new();
        for (r, (from, to, _)) in results.into_iter().zip(transfers) {
            out.push(match r.outcome {
                Ok(crate::client::AppendOutcome::Appended { block, reference }) => {
                    for id in [from, to] {
                        self.accounts
                            .get_mut(id)
                            .expect("known account")
                            .head
                            .advance(reference.clone());
                    }
                    Ok(block)
                }
                Ok(crate::client::AppendOutcome::Lost(p)) => Err(BankError::Conflict(Box::new(p))),
                Ok(crate::client::AppendOutcome::Rejected(r)) => {
                    Err(WorldError::Rejected(r).into())
                }
                Ok(crate::client::AppendOutcome::Invalid(e)) => Err(WorldError::Chain(e).into()),
                Err(_) => Err(WorldError::Stalled.into()),
            });
        }
        Ok(out)
    }

    pub fn total(&self) -> Result<u64, BankError> {
        self.accounts.keys().map(|id| self.balance(id)).sum()
    }

    pub fn ferns(&self) -> &[ServerId] {
        &self.cluster.ferns
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chains::append_block;
    use crate::crypto::Keypair;
    use crate::message::{Message, RejectReason};
    use crate::service::{Outbox, Service};

    #[test]
    fn record_round_trips() {
        let r = BankRecord::Transfer(TransferRecord {
            from: Hash([1; 32]),
            to: Hash([2; 32]),
            amount: 5,
            memo: b"m".to_vec(),
        });
        assert_eq!(BankRecord::decode(&r.encode()).unwrap(), r);
        assert!(BankRecord::decode(b"nope").is_err());
    }

    #[test]
    fn transfer_moves_money() {
        let mut bank = Bank::new(SimConfig::default()).unwrap();
        let a = bank.open_account("alice", 100).unwrap();
        let b = bank.open_account("bob", 0).unwrap();
        assert_eq!(bank.balance(&a).unwrap(), 100);
        bank.transfer(a, b, 30, b"rent").unwrap();
        assert_eq!(bank.balance(&a).unwrap(), 70);
        assert_eq!(bank.balance(&b).unwrap(), 30);
        assert_eq!(bank.history(&b).unwrap()[0].1.amount, 30);
        assert_eq!(bank.account(&a).unwrap().head.slot, 1);
    }

    #[test]
    fn overdraft_is_refused_and_nothing_moves() {
        let mut bank = Bank::new(SimConfig::default()).unwrap();
        let a = bank.open_account("alice", 10).unwrap();
        let b = bank.open_account("bob", 0).unwrap();
        assert_eq!(
            bank.transfer(a, b, 11, b"").unwrap_err(),
            BankError::InsufficientFunds {
                available: 10,
                requested: 11
            }
        );
        assert_eq!(bank.account(&a).unwrap().head.slot, 0);
        assert_eq!(bank.account(&b).unwrap().head.slot, 0);
        assert_eq!(bank.transfer(a, a, 1, b""), Err(BankError::SameAccount));
        assert_eq!(bank.transfer(a, b, 0, b""), Err(BankError::ZeroAmount));
    }

    #[test]
    fn servers_refuse_an_overdraft_the_client_did_not_check() {
        let mut bank = Bank::new(SimConfig::default()).unwrap();
        let a = bank.open_account("alice", 5).unwrap();
        let b = bank.open_account("bob", 0).unwrap();
        let heads = [
            bank.account(&a).unwrap().head.clone(),
            bank.account(&b).unwrap().head.clone(),
        ];
        let rec = BankRecord::Transfer(TransferRecord {
            from: a,
            to: b,
            amount: 50,
            memo: vec![],
        });
        let (block, instance) = append_block(&heads, vec![rec.encode()]).unwrap();
        let atts = bank.world.store(block.clone()).unwrap();
        let fern_id = bank.ferns()[0];
        let fern = bank.world.sim.node_mut::<Fern>(&fern_id).unwrap();
        let mut out = Outbox::default();
        let client = Keypair::from_name("x").id();
        fern.handle(
            0,
            client,
            Message::RequestIntegrity {
                block,
                claims: instance,
                avail: atts,
            },
            &mut out,
        );
        assert!(matches!(
            &out.sends[..],
            [(_, Message::Rejected { reason: RejectReason::AppRejected(m), .. })] if m.contains("overdraft")
        ));
    }

    #[test]
    fn double_spend_has_one_winner() {
        let mut bank = Bank::new(SimConfig::default().with_seed(3)).unwrap();
        let a = bank.open_account("alice", 100).unwrap();
        let b = bank.open_account("bob", 0).unwrap();
        let c = bank.open_account("carol", 0).unwrap();
        let out = bank.race(&[(a, b, 80), (a, c, 80)]).unwrap();
        assert_eq!(out.iter().filter(|r| r.is_ok()).count(), 1, "{out:?}");
        assert!(out.iter().any(|r| matches!(r, Err(BankError::Conflict(_)))));
        bank.world.quiesce();
        assert_eq!(bank.total().unwrap(), 100);
        assert_eq!(bank.balance(&a).unwrap(), 20);
    }
}
