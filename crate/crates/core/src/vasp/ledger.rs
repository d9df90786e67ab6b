use std::collections::BTreeMap;

/// Flat account map of one VASP. Cross-VASP transfers settle through
/// per-counterparty clearing accounts so that every posting is zero-sum.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ledger {
    balances: BTreeMap<String, i64>,
}

pub fn clearing_account(counterparty: &str) -> String {
    format!("clearing:{counterparty}")
}

impl Ledger {
    pub fn open(&mut self, account: &str, balance: i64) {
        self.balances.insert(account.to_string(), balance);
    }

    pub fn balance(&self, account: &str) -> i64 {
        self.balances.get(account).copied().unwrap_or(0)
    }

    /// Moves `amount` from one account to another.
    pub fn post(&mut self, debit: &str, credit: &str, amount: u64) {
        let amount = amount as i64;
        *self.balances.entry(debit.to_string()).or_default() -= amount;
        *self.balances.entry(credit.to_string()).or_default() += amount;
    }

    pub fn total(&self) -> i64 {
        self.balances.values().sum()
    }

    pub fn balances(&self) -> &BTreeMap<String, i64> {
        &self.balances
    }
}
