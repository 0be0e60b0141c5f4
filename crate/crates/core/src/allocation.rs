//! Sub-channel selection, modulation-variance allocation, and the
//! user/sub-channel rate-selection matrix.

use serde::{Deserialize, Serialize};

use crate::capacity::subchannel_rate;
use crate::channel::ChannelBank;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationMode {
    ExactWaterfill,
    Constant,
}

/// Per-quadrature modulation variance for every sub-channel of a bank.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceAllocation {
    pub per_subchannel: Vec<f64>,
    pub mode: AllocationMode,
}

impl VarianceAllocation {
    pub fn new(per_subchannel: Vec<f64>, mode: AllocationMode) -> Result<Self> {
        if per_subchannel.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::domain("variances must be finite and >= 0"));
        }
        if mode == AllocationMode::Constant {
            let mut nz = per_subchannel.iter().filter(|v| **v > 0.0);
            if let Some(first) = nz.next() {
                if nz.any(|v| v != first) {
                    return Err(Error::domain("constant allocation with unequal variances"));
                }
            }
        }
        Ok(Self { per_subchannel, mode })
    }

    pub fn total(&self) -> f64 {
        self.per_subchannel.iter().sum()
    }

    /// Average over all `n` sub-channels.
    pub fn mean_over_bank(&self) -> f64 {
        self.total() / self.per_subchannel.len() as f64
    }

    /// Average over the given sub-channels only.
    pub fn mean_over(&self, indices: &[usize]) -> f64 {
        if indices.is_empty() {
            return 0.0;
        }
        indices.iter().map(|&i| self.per_subchannel[i]).sum::<f64>() / indices.len() as f64
    }
}

/// Indices with `nu_i < nu_eve`, in bank order.
pub fn select_good(bank: &ChannelBank, nu_eve: f64) -> Vec<usize> {
    select_good_nus(&bank.nus(), nu_eve)
}

pub fn select_good_nus(nus: &[f64], nu_eve: f64) -> Vec<usize> {
    nus.iter()
        .enumerate()
        .filter(|(_, &nu)| nu < nu_eve)
        .map(|(i, _)| i)
        .collect()
}

/// Kuhn–Tucker solution at water level `nu_eve`: `max(0, nu_eve - nu_i)`.
pub fn waterfill_exact(bank: &ChannelBank, nu_eve: f64) -> VarianceAllocation {
    waterfill_exact_nus(&bank.nus(), nu_eve)
}

pub fn waterfill_exact_nus(nus: &[f64], nu_eve: f64) -> VarianceAllocation {
    VarianceAllocation {
        per_subchannel: nus.iter().map(|&nu| (nu_eve - nu).max(0.0)).collect(),
        mode: AllocationMode::ExactWaterfill,
    }
}

/// Water-filling for a fixed total budget: finds the level `mu` with
/// `sum max(0, mu - nu_i) = budget`.
pub fn waterfill_budget(nus: &[f64], budget: f64) -> Result<VarianceAllocation> {
    if !(budget >= 0.0) {
        return Err(Error::domain(format!("budget must be >= 0, got {budget}")));
    }
    let mut finite: Vec<f64> = nus.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::domain("no usable sub-channel"));
    }
    finite.sort_by(f64::total_cmp);
    let mut level = finite[0] + budget;
    let mut prefix = 0.0;
    for (k, &nu) in finite.iter().enumerate() {
        prefix += nu;
        let candidate = (budget + prefix) / (k + 1) as f64;
        let next = finite.get(k + 1).copied().unwrap_or(f64::INFINITY);
        if candidate <= next {
            level = candidate;
            break;
        }
    }
    Ok(waterfill_exact_nus(nus, level))
}

/// Uniform variance `nu_eve - nu_min` on every good sub-channel.
pub fn constant_variance(bank: &ChannelBank, nu_eve: f64) -> Result<VarianceAllocation> {
    constant_variance_nus(&bank.nus(), nu_eve)
}

pub fn constant_variance_nus(nus: &[f64], nu_eve: f64) -> Result<VarianceAllocation> {
    let good = select_good_nus(nus, nu_eve);
    let nu_min = good
        .iter()
        .map(|&i| nus[i])
        .min_by(f64::total_cmp)
        .ok_or_else(|| Error::domain("no good sub-channel: every nu_i >= nu_eve"))?;
    let level = nu_eve - nu_min;
    let mut per = vec![0.0; nus.len()];
    for &i in &good {
        per[i] = level;
    }
    Ok(VarianceAllocation {
        per_subchannel: per,
        mode: AllocationMode::Constant,
    })
}

/// The water-filling Lagrangian with natural-log rates:
/// `sum ln(1 + v_i / nu_i) - lambda sum v_i`. Its per-channel maximizer is
/// `max(0, 1/lambda - nu_i)`.
pub fn lagrangian_nats(nus: &[f64], variances: &[f64], lambda: f64) -> f64 {
    nus.iter()
        .zip(variances)
        .map(|(&nu, &v)| (v / nu).ln_1p() - lambda * v)
        .sum()
}

/// How rows of the matrix are assigned to users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum AllocationPolicy {
    RoundRobin,
    GreedyByGain {
        #[serde(default)]
        demands: Option<Vec<f64>>,
    },
    Explicit {
        matrix: Vec<Vec<u8>>,
    },
}

/// Binary `l x K` matrix: entry `(i, k) = 1` lets user `k` transmit on the
/// `i`-th selected sub-channel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationMatrix {
    entries: Vec<Vec<u8>>,
    subchannels: Vec<usize>,
    users: usize,
    pub block_index: u64,
}

impl AllocationMatrix {
    /// `subchannels` maps each row to a bank index; `gains` runs parallel to it.
    pub fn build(
        subchannels: &[usize],
        users: usize,
        policy: &AllocationPolicy,
        gains: &[f64],
        block_index: u64,
    ) -> Result<Self> {
        let l = subchannels.len();
        if l == 0 || users == 0 {
            return Err(Error::argument(format!(
                "allocation needs l >= 1 and K >= 1, got l = {l}, K = {users}"
            )));
        }
        let entries = match policy {
            AllocationPolicy::RoundRobin => (0..l).map(|i| one_hot(i % users, users)).collect(),
            AllocationPolicy::GreedyByGain { demands } => {
                if gains.len() != l {
                    return Err(Error::argument(format!("{} gains for {l} sub-channels", gains.len())));
                }
                let weights = match demands {
                    Some(d) if d.len() != users => {
                        return Err(Error::argument(format!("{} demands for {users} users", d.len())))
                    }
                    Some(d) => d.clone(),
                    None => vec![1.0; users],
                };
                // Stable sorts keep ascending index order among ties.
                let mut by_gain: Vec<usize> = (0..l).collect();
                by_gain.sort_by(|&a, &b| gains[b].total_cmp(&gains[a]));
                let mut by_demand: Vec<usize> = (0..users).collect();
                by_demand.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]));
                let mut entries = vec![vec![0u8; users]; l];
                for (rank, &row) in by_gain.iter().enumerate() {
                    entries[row][by_demand[rank % users]] = 1;
                }
                entries
            }
            AllocationPolicy::Explicit { matrix } => {
                if matrix.len() != l || matrix.iter().any(|r| r.len() != users) {
                    return Err(Error::argument(format!("explicit matrix must be {l} x {users}")));
                }
                if matrix.iter().flatten().any(|&e| e > 1) {
                    return Err(Error::argument("explicit matrix entries must be 0 or 1"));
                }
                matrix.clone()
            }
        };
        Ok(Self {
            entries,
            subchannels: subchannels.to_vec(),
            users,
            block_index,
        })
    }

    pub fn rows(&self) -> usize {
        self.entries.len()
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn entries(&self) -> &[Vec<u8>] {
        &self.entries
    }

    pub fn subchannels(&self) -> &[usize] {
        &self.subchannels
    }

    pub fn get(&self, row: usize, user: usize) -> bool {
        self.entries[row][user] == 1
    }

    /// A user is in the transmit set iff its column holds a 1.
    pub fn is_allocated(&self, user: usize) -> bool {
        self.entries.iter().any(|r| r[user] == 1)
    }

    /// Bank indices assigned to `user`, in row order.
    pub fn subchannels_of(&self, user: usize) -> Vec<usize> {
        self.entries
            .iter()
            .zip(&self.subchannels)
            .filter(|(r, _)| r[user] == 1)
            .map(|(_, &i)| i)
            .collect()
    }

    /// Row positions assigned to `user`.
    pub fn rows_of(&self, user: usize) -> Vec<usize> {
        (0..self.rows()).filter(|&r| self.entries[r][user] == 1).collect()
    }

    /// Number of users sharing `row`.
    pub fn row_weight(&self, row: usize) -> usize {
        self.entries[row].iter().filter(|&&e| e == 1).count()
    }

    /// CSV with a header row of user IDs and one 0/1 row per sub-channel.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(vec![]);
        w.write_record((0..self.users).map(|k| format!("user_{k}")))
            .map_err(|e| Error::Parse(e.to_string()))?;
        for row in &self.entries {
            w.write_record(row.iter().map(|e| e.to_string()))
                .map_err(|e| Error::Parse(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_csv(text: &str, subchannels: &[usize], block_index: u64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let users = r.headers().map_err(|e| Error::Parse(e.to_string()))?.len();
        let mut matrix = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            let row = rec
                .iter()
                .map(|f| f.trim().parse::<u8>().map_err(|e| Error::Parse(format!("{f:?}: {e}"))))
                .collect::<Result<Vec<u8>>>()?;
            matrix.push(row);
        }
        Self::build(
            subchannels,
            users,
            &AllocationPolicy::Explicit { matrix },
            &[],
            block_index,
        )
    }
}

fn one_hot(k: usize, users: usize) -> Vec<u8> {
    let mut row = vec![0u8; users];
    row[k] = 1;
    row
}

/// Rate of `user` in bits per block use. A sub-channel shared by several
/// users contributes an equal share of its rate to each.
pub fn user_rate(
    matrix: &AllocationMatrix,
    bank: &ChannelBank,
    alloc: &VarianceAllocation,
    user: usize,
) -> Result<f64> {
    if user >= matrix.users() {
        return Err(Error::argument(format!(
            "user {user} out of range for K = {}",
            matrix.users()
        )));
    }
    Ok(matrix
        .rows_of(user)
        .into_iter()
        .map(|row| {
            let i = matrix.subchannels[row];
            subchannel_rate(alloc.per_subchannel[i], bank.fourier_gains()[i], bank.noise(i))
                / matrix.row_weight(row) as f64
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capacity::sum_capacity;
    use approx::assert_relative_eq;
    use num_complex::Complex64;
    use proptest::prelude::*;

    /// Unit Fourier gains, so each nu_i equals the noise variance.
    fn bank_with_nus(nus: &[f64]) -> ChannelBank {
        ChannelBank::from_fourier(vec![Complex64::new(1.0, 0.0); nus.len()], nus.to_vec()).unwrap()
    }

    #[test]
    fn selection_is_strict() {
        let bank = bank_with_nus(&[0.2, 0.4, 1.5]);
        assert_eq!(select_good(&bank, 1.0), vec![0, 1]);
        assert!(select_good(&bank, 0.1).is_empty());
        assert_eq!(select_good_nus(&[1.0, 0.5], 1.0), vec![1]);
    }

    #[test]
    fn waterfill_examples() {
        let wf = waterfill_exact(&bank_with_nus(&[0.2, 0.4]), 1.0);
        assert_relative_eq!(wf.per_subchannel[0], 0.8, epsilon = 1e-15);
        assert_relative_eq!(wf.per_subchannel[1], 0.6, epsilon = 1e-15);
        assert_eq!(waterfill_exact(&bank_with_nus(&[2.0]), 1.0).per_subchannel, vec![0.0]);
        assert_eq!(
            waterfill_exact(&bank_with_nus(&[1.0, 1.0]), 1.0).per_subchannel,
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn waterfill_matches_grid_maximized_lagrangian() {
        // Each term of the Lagrangian separates; maximize it on a fine grid.
        let (nus, nu_eve) = ([0.2, 0.4], 1.0);
        let wf = waterfill_exact_nus(&nus, nu_eve);
        for (i, &nu) in nus.iter().enumerate() {
            let best = (0..=200_000)
                .map(|k| k as f64 * 1e-5)
                .max_by(|&a, &b| {
                    lagrangian_nats(&[nu], &[a], 1.0 / nu_eve).total_cmp(&lagrangian_nats(&[nu], &[b], 1.0 / nu_eve))
                })
                .unwrap();
            assert!((best - wf.per_subchannel[i]).abs() < 2e-5, "{best}");
        }
    }

    #[test]
    fn constant_examples() {
        let c = constant_variance(&bank_with_nus(&[0.2, 0.4]), 1.0).unwrap();
        assert_eq!(c.per_subchannel, vec![0.8, 0.8]);
        let one = bank_with_nus(&[0.3]);
        assert_eq!(
            constant_variance(&one, 1.0).unwrap().per_subchannel,
            waterfill_exact(&one, 1.0).per_subchannel
        );
        assert!(constant_variance(&bank_with_nus(&[1.2, 3.0]), 1.0).is_err());
    }

    #[test]
    fn budget_waterfill_spends_budget() {
        let nus = [0.5, 0.1, 2.0, f64::INFINITY];
        let wf = waterfill_budget(&nus, 1.0).unwrap();
        assert_relative_eq!(wf.total(), 1.0, epsilon = 1e-12);
        assert_eq!(wf.per_subchannel[2], 0.0);
        assert_eq!(wf.per_subchannel[3], 0.0);
        assert_relative_eq!(wf.per_subchannel[1] + 0.1, wf.per_subchannel[0] + 0.5, epsilon = 1e-12);
    }

    #[test]
    fn matrix_policies() {
        let m = AllocationMatrix::build(&[0, 1, 2, 3], 2, &AllocationPolicy::RoundRobin, &[], 0).unwrap();
        assert_eq!(m.subchannels_of(0), vec![0, 2]);
        assert_eq!(m.subchannels_of(1), vec![1, 3]);

        let single = AllocationMatrix::build(&[0, 1, 2], 1, &AllocationPolicy::RoundRobin, &[], 0).unwrap();
        assert!(single.entries().iter().all(|r| r == &vec![1]));

        let explicit = AllocationPolicy::Explicit {
            matrix: vec![vec![1, 0], vec![0, 1]],
        };
        let e = AllocationMatrix::build(&[0, 1], 2, &explicit, &[], 3).unwrap();
        assert_eq!(e.entries(), &[vec![1, 0], vec![0, 1]]);

        let bad_shape = AllocationPolicy::Explicit {
            matrix: vec![vec![1, 0, 0], vec![0, 1, 0]],
        };
        assert!(AllocationMatrix::build(&[0, 1], 2, &bad_shape, &[], 0).is_err());
        let non_binary = AllocationPolicy::Explicit {
            matrix: vec![vec![2, 0], vec![0, 1]],
        };
        assert!(AllocationMatrix::build(&[0, 1], 2, &non_binary, &[], 0).is_err());
    }

    #[test]
    fn greedy_deals_best_gain_to_heaviest_user() {
        let policy = AllocationPolicy::GreedyByGain {
            demands: Some(vec![1.0, 3.0, 1.0]),
        };
        let m = AllocationMatrix::build(&[4, 5, 6, 7], 3, &policy, &[0.1, 0.9, 0.5, 0.5], 0).unwrap();
        // Gain order: rows 1, 2, 3, 0. Demand order: users 1, 0, 2.
        assert_eq!(m.subchannels_of(1), vec![4, 5]);
        assert_eq!(m.subchannels_of(0), vec![6]);
        assert_eq!(m.subchannels_of(2), vec![7]);
        assert!((0..4).all(|r| m.row_weight(r) == 1));
    }

    #[test]
    fn csv_round_trip() {
        let m = AllocationMatrix::build(&[2, 5, 7], 2, &AllocationPolicy::RoundRobin, &[], 1).unwrap();
        let text = m.to_csv().unwrap();
        assert_eq!(text, "user_0,user_1\n1,0\n0,1\n1,0\n");
        assert_eq!(AllocationMatrix::from_csv(&text, &[2, 5, 7], 1).unwrap(), m);
        assert!(AllocationMatrix::from_csv("a,b\n1,x\n", &[0], 0).is_err());
    }

    #[test]
    fn rates() {
        let bank = bank_with_nus(&[1.0, 0.5]);
        let alloc = VarianceAllocation::new(vec![1.0, 0.5], AllocationMode::ExactWaterfill).unwrap();
        let m = AllocationMatrix::build(&[0, 1], 3, &AllocationPolicy::RoundRobin, &[], 0).unwrap();
        assert_relative_eq!(user_rate(&m, &bank, &alloc, 0).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(user_rate(&m, &bank, &alloc, 2).unwrap(), 0.0);
        assert!(user_rate(&m, &bank, &alloc, 3).is_err());

        let full = AllocationMatrix::build(&[0, 1], 1, &AllocationPolicy::RoundRobin, &[], 0).unwrap();
        let sum = sum_capacity(&bank, &alloc, &[0, 1]).unwrap();
        assert!((user_rate(&full, &bank, &alloc, 0).unwrap() - sum).abs() < 1e-12);
    }

    #[test]
    fn shared_rows_split_equally() {
        let bank = bank_with_nus(&[1.0, 1.0]);
        let alloc = VarianceAllocation::new(vec![1.0, 3.0], AllocationMode::ExactWaterfill).unwrap();
        let policy = AllocationPolicy::Explicit {
            matrix: vec![vec![1, 1], vec![0, 1]],
        };
        let m = AllocationMatrix::build(&[0, 1], 2, &policy, &[], 0).unwrap();
        assert_relative_eq!(user_rate(&m, &bank, &alloc, 0).unwrap(), 0.5);
        assert_relative_eq!(user_rate(&m, &bank, &alloc, 1).unwrap(), 2.5);
    }

    proptest! {
        #[test]
        fn waterfill_beats_same_budget_vectors(
            nus in prop::collection::vec(0.05f64..2.0, 1..8),
            nu_eve in 0.1f64..3.0,
            weights in prop::collection::vec(0.0f64..1.0, 8),
        ) {
            let wf = waterfill_exact_nus(&nus, nu_eve);
            let budget = wf.total();
            let w = &weights[..nus.len()];
            let ws: f64 = w.iter().sum();
            prop_assume!(budget > 0.0 && ws > 0.0);
            let other: Vec<f64> = w.iter().map(|x| x / ws * budget).collect();
            let lambda = 1.0 / nu_eve;
            prop_assert!(lagrangian_nats(&nus, &other, lambda) <= lagrangian_nats(&nus, &wf.per_subchannel, lambda) + 1e-9);
        }

        #[test]
        fn raising_nu_eve_is_monotone(nus in prop::collection::vec(0.05f64..2.0, 1..8), a in 0.1f64..3.0, b in 0.0f64..1.0) {
            let lo = select_good_nus(&nus, a);
            let hi = select_good_nus(&nus, a + b);
            prop_assert!(hi.len() >= lo.len());
            if let (Ok(c0), Ok(c1)) = (constant_variance_nus(&nus, a), constant_variance_nus(&nus, a + b)) {
                let v0 = c0.per_subchannel.iter().cloned().fold(0.0, f64::max);
                let v1 = c1.per_subchannel.iter().cloned().fold(0.0, f64::max);
                prop_assert!(v1 >= v0);
            }
        }

        #[test]
        fn user_rates_conserve_total(nus in prop::collection::vec(0.05f64..2.0, 1..10), users in 1usize..5) {
            let bank = bank_with_nus(&nus);
            let alloc = waterfill_exact(&bank, 2.5);
            let good: Vec<usize> = (0..nus.len()).collect();
            let m = AllocationMatrix::build(&good, users, &AllocationPolicy::RoundRobin, &[], 0).unwrap();
            let total: f64 = (0..users).map(|k| user_rate(&m, &bank, &alloc, k).unwrap()).sum();
            let direct = sum_capacity(&bank, &alloc, &good).unwrap();
            prop_assert!((total - direct).abs() <= 1e-12 * direct.max(1.0));
        }
    }
}
