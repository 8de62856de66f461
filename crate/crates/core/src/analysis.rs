//! Capacity sweeps over (rank, load, seed) and the parameter-efficiency curve.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memlab::{evaluate, gen_phonebook, slice_by_budget, train, TrainConfig, DEFAULT_D_IN, D_OUT};
use crate::VERSION;

/// Shortest possible QA line in whitespace tokens.
const MIN_RECORD_TOKENS: usize = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub ranks: Vec<usize>,
    /// Knowledge loads in tokens.
    pub loads: Vec<usize>,
    pub seeds: Vec<u64>,
    pub threshold: f64,
    pub d_in: usize,
    pub train: TrainConfig,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            ranks: vec![2, 4, 8, 16, 32],
            loads: vec![64, 128, 192, 256, 384, 512, 768, 1024, 1536, 2048, 3072, 4096],
            seeds: vec![0, 1, 2],
            threshold: 0.9,
            d_in: DEFAULT_D_IN,
            train: TrainConfig::default(),
        }
    }
}

fn strictly_increasing<T: PartialOrd>(v: &[T]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.ranks.is_empty() || self.loads.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("sweep grid needs at least one rank, load and seed"));
        }
        if !strictly_increasing(&self.ranks) || !strictly_increasing(&self.loads) {
            return Err(Error::invalid("ranks and loads must be strictly increasing"));
        }
        if self.ranks[0] == 0 || self.d_in == 0 {
            return Err(Error::invalid("ranks and d_in must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::invalid(format!("threshold {} outside (0, 1]", self.threshold)));
        }
        self.train.validate()
    }

    /// Records drawn per seed; enough to cover the largest load.
    pub fn pool_size(&self) -> usize {
        self.loads.iter().max().copied().unwrap_or(0) / MIN_RECORD_TOKENS + 2
    }

    /// Trainable parameters of one rank-`r` memory adapter.
    pub fn n_params(&self, rank: usize) -> usize {
        rank * (self.d_in + D_OUT)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub rank: usize,
    pub load_tokens: usize,
    pub seed: u64,
    pub em: f64,
    pub n_params: usize,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyPoint {
    pub rank: usize,
    pub t_max: usize,
    pub n_params: usize,
    pub efficiency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: SweepGrid,
    /// Cells in grid order: seed, then rank, then load.
    pub cells: Vec<SweepCell>,
}

/// Trains and scores every grid cell.
pub fn run_sweep(grid: &SweepGrid) -> Result<SweepResult> {
    grid.validate()?;
    let mut cells = Vec::with_capacity(grid.ranks.len() * grid.loads.len() * grid.seeds.len());
    for &seed in &grid.seeds {
        let source = gen_phonebook(grid.pool_size(), seed)?;
        for &rank in &grid.ranks {
            let config = TrainConfig { seed, ..grid.train.at_rank(rank) };
            for &load in &grid.loads {
                let dataset = slice_by_budget::<f64>(&source, load, grid.d_in)?;
                let em = train(&dataset, &config)
                    .and_then(|out| evaluate(&out.model, &dataset))
                    .map_err(|e| e.context(format!("sweep cell rank={rank} load={load} seed={seed}")))?;
                log::info!("sweep cell rank={rank} load={load} seed={seed}: em {em}");
                cells.push(SweepCell {
                    rank,
                    load_tokens: load,
                    seed,
                    em,
                    n_params: grid.n_params(rank),
                    records: dataset.len(),
                });
            }
        }
    }
    Ok(SweepResult { grid: grid.clone(), cells })
}

/// Largest load whose score reaches `tau`, or none when the first load
/// already falls short. `curve` is (load, score) in increasing load order.
pub fn t_max_from_curve(curve: &[(usize, f64)], tau: f64) -> Option<usize> {
    match curve.first() {
        Some(&(_, first)) if first >= tau => curve.iter().filter(|(_, s)| *s >= tau).map(|(l, _)| *l).max(),
        _ => None,
    }
}

/// True when the pass/fail sequence along the curve changes at most once,
/// from passing to failing.
pub fn crosses_once(curve: &[(usize, f64)], tau: f64) -> bool {
    let mut failed = false;
    for &(_, s) in curve {
        if s < tau {
            failed = true;
        } else if failed {
            return false;
        }
    }
    true
}

impl SweepResult {
    fn check_rank(&self, rank: usize) -> Result<()> {
        if self.grid.ranks.contains(&rank) {
            Ok(())
        } else {
            Err(Error::UnknownId(format!("rank {rank} is not in the sweep grid")))
        }
    }

    pub fn em(&self, rank: usize, load: usize, seed: u64) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.rank == rank && c.load_tokens == load && c.seed == seed)
            .map(|c| c.em)
    }

    /// Mean over seeds of the exact-match rate at one (rank, load).
    pub fn mean_em(&self, rank: usize, load: usize) -> Option<f64> {
        let ems: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.rank == rank && c.load_tokens == load)
            .map(|c| c.em)
            .collect();
        (!ems.is_empty()).then(|| ems.iter().sum::<f64>() / ems.len() as f64)
    }

    /// Mean EM against load for one rank.
    pub fn load_curve(&self, rank: usize) -> Result<Vec<(usize, f64)>> {
        self.check_rank(rank)?;
        Ok(self
            .grid
            .loads
            .iter()
            .filter_map(|&l| self.mean_em(rank, l).map(|m| (l, m)))
            .collect())
    }

    /// Mean EM against rank at one load.
    pub fn rank_curve(&self, load: usize) -> Vec<(usize, f64)> {
        self.grid
            .ranks
            .iter()
            .filter_map(|&r| self.mean_em(r, load).map(|m| (r, m)))
            .collect()
    }

    pub fn find_t_max(&self, rank: usize, tau: f64) -> Result<Option<usize>> {
        Ok(t_max_from_curve(&self.load_curve(rank)?, tau))
    }

    /// Efficiency per rank; ranks with no T_max are left out.
    pub fn efficiency_curve(&self, tau: f64) -> Result<Vec<EfficiencyPoint>> {
        let mut out = Vec::new();
        for &rank in &self.grid.ranks {
            if let Some(t_max) = self.find_t_max(rank, tau)? {
                let n_params = self.grid.n_params(rank);
                out.push(EfficiencyPoint {
                    rank,
                    t_max,
                    n_params,
                    efficiency: t_max as f64 / n_params as f64,
                });
            }
        }
        Ok(out)
    }

    /// Rank with the highest efficiency; the lowest rank wins a tie.
    pub fn peak_rank(&self, tau: f64) -> Result<Option<usize>> {
        let curve = self.efficiency_curve(tau)?;
        Ok(curve
            .iter()
            .fold(None::<&EfficiencyPoint>, |best, p| match best {
                Some(b) if b.efficiency >= p.efficiency => Some(b),
                _ => Some(p),
            })
            .map(|p| p.rank))
    }

    pub fn seeds_by_cell(&self) -> BTreeMap<(usize, usize), Vec<f64>> {
        let mut out: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        for c in &self.cells {
            out.entry((c.rank, c.load_tokens)).or_default().push(c.em);
        }
        out
    }

    fn header(&self) -> Result<String> {
        Ok(format!(
            "# loramem {VERSION}\n# config {}\n",
            serde_json::to_string(&self.grid)?
        ))
    }

    /// `rank,load_tokens,seed,em,n_params` with a commented header.
    pub fn results_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["rank", "load_tokens", "seed", "em", "n_params"])?;
        for c in &self.cells {
            w.write_record([
                c.rank.to_string(),
                c.load_tokens.to_string(),
                c.seed.to_string(),
                c.em.to_string(),
                c.n_params.to_string(),
            ])?;
        }
        self.finish_csv(w)
    }

    /// `rank,t_max,n_params,efficiency` at the grid threshold.
    pub fn efficiency_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["rank", "t_max", "n_params", "efficiency"])?;
        for p in self.efficiency_curve(self.grid.threshold)? {
            w.write_record([
                p.rank.to_string(),
                p.t_max.to_string(),
                p.n_params.to_string(),
                p.efficiency.to_string(),
            ])?;
        }
        self.finish_csv(w)
    }

    fn finish_csv(&self, w: csv::Writer<Vec<u8>>) -> Result<String> {
        let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(self.header()? + &String::from_utf8(body).expect("csv output is utf-8"))
    }
}

/// Parses the config line of a report header.
pub fn grid_from_csv_header(text: &str) -> Result<SweepGrid> {
    let line = text
        .lines()
        .find_map(|l| l.strip_prefix("# config "))
        .ok_or_else(|| Error::invalid("no config line in report header"))?;
    Ok(serde_json::from_str(line)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_grid() -> SweepGrid {
        SweepGrid {
            ranks: vec![2, 8],
            loads: vec![64, 256],
            seeds: vec![0, 1],
            d_in: 32,
            train: TrainConfig { steps: 100, ..TrainConfig::default() },
            ..SweepGrid::default()
        }
    }

    #[test]
    fn degenerate_grid_matches_direct_training() {
        let grid = SweepGrid {
            ranks: vec![4],
            loads: vec![128],
            seeds: vec![3],
            d_in: 32,
            train: TrainConfig { steps: 200, ..TrainConfig::default() },
            ..SweepGrid::default()
        };
        let result = run_sweep(&grid).unwrap();
        assert_eq!(result.cells.len(), 1);
        let source = gen_phonebook(grid.pool_size(), 3).unwrap();
        let ds = slice_by_budget::<f64>(&source, 128, 32).unwrap();
        let config = TrainConfig { seed: 3, ..grid.train.at_rank(4) };
        let direct = evaluate(&train(&ds, &config).unwrap().model, &ds).unwrap();
        assert_eq!(result.cells[0].em, direct);
    }

    #[test]
    fn sweep_is_deterministic_and_complete() {
        let grid = tiny_grid();
        let a = run_sweep(&grid).unwrap();
        let b = run_sweep(&grid).unwrap();
        assert_eq!(a.cells.len(), 8);
        assert_eq!(a, b);
        assert_eq!(a.results_csv().unwrap(), b.results_csv().unwrap());
        for &r in &grid.ranks {
            for &l in &grid.loads {
                for &s in &grid.seeds {
                    assert!(a.em(r, l, s).is_some());
                }
            }
        }
    }

    #[test]
    fn t_max_linear_scan() {
        let curve = [(1000, 0.99), (2000, 0.95), (3000, 0.60)];
        assert_eq!(t_max_from_curve(&curve, 0.9), Some(2000));
        assert_eq!(t_max_from_curve(&curve, 0.5), Some(3000));
        assert_eq!(t_max_from_curve(&curve, 0.995), None);
        assert!(crosses_once(&curve, 0.9));
        assert!(!crosses_once(&[(1, 0.95), (2, 0.5), (3, 0.95)], 0.9));
        assert!(crosses_once(&[(1, 0.1), (2, 0.2)], 0.9));
    }

    #[test]
    fn efficiency_values() {
        let grid = SweepGrid { d_in: 256, ..SweepGrid::default() };
        assert_eq!(grid.n_params(4), 1424);
        let result = SweepResult {
            cells: vec![
                SweepCell { rank: 4, load_tokens: 1024, seed: 0, em: 1.0, n_params: 1424, records: 0 },
                SweepCell { rank: 8, load_tokens: 1024, seed: 0, em: 1.0, n_params: 2848, records: 0 },
            ],
            grid: SweepGrid { ranks: vec![4, 8], loads: vec![1024], seeds: vec![0], ..grid },
        };
        let curve = result.efficiency_curve(0.9).unwrap();
        assert!((curve[0].efficiency - 0.719_101_123_595_505_6).abs() < 1e-15);
        assert_eq!(curve[0].efficiency, 2.0 * curve[1].efficiency);
        assert_eq!(result.peak_rank(0.9).unwrap(), Some(4));
        assert!(result.find_t_max(5, 0.9).is_err());
    }

    #[test]
    fn csv_header_round_trips_config() {
        let result = run_sweep(&SweepGrid { seeds: vec![0], ..tiny_grid() }).unwrap();
        let csv = result.results_csv().unwrap();
        assert!(csv.starts_with(&format!("# loramem {VERSION}\n")));
        assert_eq!(grid_from_csv_header(&csv).unwrap(), result.grid);
        let body: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(body[0], "rank,load_tokens,seed,em,n_params");
        assert_eq!(body.len(), 1 + result.cells.len());
        assert!(result.efficiency_csv().unwrap().contains("rank,t_max,n_params,efficiency"));
    }

    #[test]
    fn invalid_grids() {
        assert!(SweepGrid { ranks: vec![], ..SweepGrid::default() }.validate().is_err());
        assert!(SweepGrid { loads: vec![2, 1], ..SweepGrid::default() }.validate().is_err());
        assert!(SweepGrid { threshold: 0.0, ..SweepGrid::default() }.validate().is_err());
        assert!(SweepGrid::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn t_max_is_monotone_in_tau(scores in prop::collection::vec(0.0f64..=1.0, 1..8), t1 in 0.01f64..1.0, t2 in 0.01f64..1.0) {
            let curve: Vec<(usize, f64)> = scores.iter().enumerate().map(|(i, &s)| ((i + 1) * 100, s)).collect();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = t_max_from_curve(&curve, lo);
            let b = t_max_from_curve(&curve, hi);
            if let Some(b) = b {
                prop_assert!(a.is_some_and(|a| a >= b));
            }
        }

        #[test]
        fn relabeling_loads_moves_t_max_consistently(scores in prop::collection::vec(0.0f64..=1.0, 1..8), gaps in prop::collection::vec(1usize..50, 8)) {
            let loads: Vec<usize> = (0..scores.len()).map(|i| (i + 1) * 10).collect();
            let mut relabeled = Vec::new();
            let mut acc = 0;
            for g in gaps.iter().take(scores.len()) {
                acc += g;
                relabeled.push(acc);
            }
            let before: Vec<(usize, f64)> = loads.iter().copied().zip(scores.iter().copied()).collect();
            let after: Vec<(usize, f64)> = relabeled.iter().copied().zip(scores.iter().copied()).collect();
            let pos = t_max_from_curve(&before, 0.5).map(|t| loads.iter().position(|&l| l == t).unwrap());
            let pos2 = t_max_from_curve(&after, 0.5).map(|t| relabeled.iter().position(|&l| l == t).unwrap());
            prop_assert_eq!(pos, pos2);
        }
    }
}
