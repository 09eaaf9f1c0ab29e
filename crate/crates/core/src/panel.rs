//! Location-period panels: ingestion, validation, sample filtering and the
//! derived spatial coordination columns.
//!
//! A *neighborhood* is every other location occupying the same
//! `(cabinet, cage_pos)` position. Enrichment is position based: the
//! neighbors of record `(i, t)` are the other records at period `t` (or
//! `t - 1` for lagged quantities) sharing `i`'s position at `t`. For panels
//! without movers this is exactly the location-level [`NeighborhoodMap`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Number of thermal cage positions per cabinet.
pub const N_CAGES: usize = 3;

/// One observed location-period as it appears in an input file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanelRecord {
    pub location_id: String,
    pub period: i64,
    pub cabinet: i64,
    pub cage_pos: u8,
    /// Quarters since the unit at this location was installed.
    pub age_quarters: u32,
    pub fail: bool,
    /// The replacement decision taken this period.
    pub replace: bool,
}

/// Input column names. [`ColumnMap::default`] uses the canonical schema.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColumnMap {
    pub location_id: String,
    pub period: String,
    pub cabinet: String,
    pub cage: String,
    pub age_quarters: String,
    pub fail: String,
    pub replace: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            location_id: "location_id".into(),
            period: "period".into(),
            cabinet: "cabinet".into(),
            cage: "cage".into(),
            age_quarters: "age_quarters".into(),
            fail: "fail".into(),
            replace: "replace".into(),
        }
    }
}

impl ColumnMap {
    fn columns(&self) -> [&str; 7] {
        [
            &self.location_id,
            &self.period,
            &self.cabinet,
            &self.cage,
            &self.age_quarters,
            &self.fail,
            &self.replace,
        ]
    }
}

/// A validated panel, sorted by `(location_id, period)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Panel {
    records: Vec<PanelRecord>,
}

impl Panel {
    /// Validates `records` and sorts them. Row numbers in diagnostics are the
    /// 1-based positions in `records`.
    pub fn from_records(records: Vec<PanelRecord>) -> Result<Self> {
        let mut seen: HashMap<(&str, i64), usize> = HashMap::with_capacity(records.len());
        for (idx, r) in records.iter().enumerate() {
            let row = idx + 1;
            if usize::from(r.cage_pos) >= N_CAGES {
                return Err(Error::Domain {
                    row,
                    message: format!("cage_pos {} outside {{0,1,2}}", r.cage_pos),
                });
            }
            if let Some(first) = seen.insert((r.location_id.as_str(), r.period), row) {
                return Err(Error::Integrity(format!(
                    "duplicate record for location `{}` period {} at rows {first} and {row}",
                    r.location_id, r.period
                )));
            }
        }

        let mut order: Vec<usize> = (0..records.len()).collect();
        order.sort_by(|&a, &b| {
            (&records[a].location_id, records[a].period)
                .cmp(&(&records[b].location_id, records[b].period))
        });
        for pair in order.windows(2) {
            let (a, b) = (&records[pair[0]], &records[pair[1]]);
            if a.location_id == b.location_id
                && b.period == a.period + 1
                && a.replace
                && b.age_quarters > 1
            {
                return Err(Error::Domain {
                    row: pair[1] + 1,
                    message: format!(
                        "location `{}` replaced at period {} but has age_quarters {} at period {}",
                        a.location_id, a.period, b.age_quarters, b.period
                    ),
                });
            }
        }

        let mut slots: Vec<Option<PanelRecord>> = records.into_iter().map(Some).collect();
        let records = order
            .into_iter()
            .map(|i| slots[i].take().expect("each index visited once"))
            .collect();
        Ok(Self { records })
    }

    pub fn records(&self) -> &[PanelRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_locations(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.location_id.as_str())
            .collect::<HashSet<_>>()
            .len()
    }

    /// Writes the panel in the canonical ingestion schema.
    pub fn write_csv(&self, path: &Path, delimiter: u8) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(file, delimiter)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }

    fn write_to<W: std::io::Write>(&self, out: W, delimiter: u8) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(out);
        w.write_record(ColumnMap::default().columns())?;
        for r in &self.records {
            w.write_record([
                r.location_id.clone(),
                r.period.to_string(),
                r.cabinet.to_string(),
                r.cage_pos.to_string(),
                r.age_quarters.to_string(),
                u8::from(r.fail).to_string(),
                u8::from(r.replace).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self, delimiter: u8) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf, delimiter)
            .expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

/// Reads a header-row, delimiter-separated panel file.
///
/// Row numbers in diagnostics count data rows from 1 (the header is row 0).
pub fn load_panel(path: &Path, schema: &ColumnMap, delimiter: u8) -> Result<Panel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_panel(file, schema, delimiter)
}

pub fn read_panel<R: std::io::Read>(input: R, schema: &ColumnMap, delimiter: u8) -> Result<Panel> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read header row: {e}")))?
        .clone();
    let mut index = [0usize; 7];
    for (slot, name) in index.iter_mut().zip(schema.columns()) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing required column `{name}`")))?;
    }
    let names = schema.columns();

    let mut records = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let row_no = idx + 1;
        let row = row.map_err(|e| Error::Parse {
            row: row_no,
            column: "*".into(),
            message: e.to_string(),
        })?;
        let field = |k: usize| row.get(index[k]).unwrap_or("");
        let int = |k: usize| -> Result<i64> {
            field(k).parse::<i64>().map_err(|e| Error::Parse {
                row: row_no,
                column: names[k].to_string(),
                message: format!("`{}`: {e}", field(k)),
            })
        };
        let flag = |k: usize| -> Result<bool> {
            match field(k) {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::Parse {
                    row: row_no,
                    column: names[k].to_string(),
                    message: format!("expected 0 or 1, got `{other}`"),
                }),
            }
        };

        let location_id = field(0).to_string();
        if location_id.is_empty() {
            return Err(Error::Parse {
                row: row_no,
                column: names[0].to_string(),
                message: "empty location identifier".into(),
            });
        }
        let cage = int(3)?;
        if !(0..N_CAGES as i64).contains(&cage) {
            return Err(Error::Domain {
                row: row_no,
                message: format!("cage_pos {cage} outside {{0,1,2}}"),
            });
        }
        let age = int(4)?;
        if age < 0 {
            return Err(Error::Domain {
                row: row_no,
                message: format!("negative age_quarters {age}"),
            });
        }
        let age_quarters = u32::try_from(age).map_err(|_| Error::Domain {
            row: row_no,
            message: format!("age_quarters {age} too large"),
        })?;
        records.push(PanelRecord {
            location_id,
            period: int(1)?,
            cabinet: int(2)?,
            cage_pos: cage as u8,
            age_quarters,
            fail: flag(5)?,
            replace: flag(6)?,
        });
    }
    Panel::from_records(records)
}

/// Sample restrictions applied before estimation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterConfig {
    pub t_min: i64,
    pub t_max: i64,
    pub drop_movers: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            t_min: 8,
            t_max: 20,
            drop_movers: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_min > self.t_max {
            return Err(Error::invalid(format!(
                "t_min {} exceeds t_max {}",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }
}

/// Record counts removed by each filtering rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub input_records: usize,
    pub dropped_movers: usize,
    pub mover_locations: usize,
    pub dropped_window: usize,
    pub kept: usize,
}

fn mover_ids(records: &[PanelRecord]) -> HashSet<&str> {
    let mut first: HashMap<&str, (i64, u8)> = HashMap::new();
    let mut movers = HashSet::new();
    for r in records {
        let pos = (r.cabinet, r.cage_pos);
        if *first.entry(&r.location_id).or_insert(pos) != pos {
            movers.insert(r.location_id.as_str());
        }
    }
    movers
}

fn drop_movers(panel: &Panel, report: &mut FilterReport) -> Panel {
    let movers = mover_ids(&panel.records);
    report.mover_locations = movers.len();
    let records: Vec<PanelRecord> = panel
        .records
        .iter()
        .filter(|r| !movers.contains(r.location_id.as_str()))
        .cloned()
        .collect();
    report.dropped_movers = panel.len() - records.len();
    Panel { records }
}

/// Applies the period window and (optionally) the mover exclusion.
///
/// A mover is a location whose `(cabinet, cage_pos)` changes anywhere in its
/// history, including outside the window.
pub fn filter_sample(panel: &Panel, cfg: &FilterConfig) -> Result<(Panel, FilterReport)> {
    cfg.validate()?;
    let mut report = FilterReport {
        input_records: panel.len(),
        ..Default::default()
    };
    let base = if cfg.drop_movers {
        drop_movers(panel, &mut report)
    } else {
        panel.clone()
    };
    let records: Vec<PanelRecord> = base
        .records
        .into_iter()
        .filter(|r| (cfg.t_min..=cfg.t_max).contains(&r.period))
        .collect();
    report.dropped_window = report.input_records - report.dropped_movers - records.len();
    report.kept = records.len();
    if records.is_empty() {
        return Err(Error::EmptySample(format!(
            "no records remain in periods [{}, {}]; estimation impossible",
            cfg.t_min, cfg.t_max
        )));
    }
    Ok((Panel { records }, report))
}

/// Drops movers, enriches on the full history, then restricts to the window,
/// so that lagged columns in the window's first period see the prior period.
pub fn prepare(panel: &Panel, cfg: &FilterConfig) -> Result<(EnrichedPanel, FilterReport)> {
    cfg.validate()?;
    let mut report = FilterReport {
        input_records: panel.len(),
        ..Default::default()
    };
    let base = if cfg.drop_movers {
        drop_movers(panel, &mut report)
    } else {
        panel.clone()
    };
    let enriched = enrich(&base).restrict_window(cfg.t_min, cfg.t_max);
    report.kept = enriched.len();
    report.dropped_window = report.input_records - report.dropped_movers - report.kept;
    if enriched.is_empty() {
        return Err(Error::EmptySample(format!(
            "no records remain in periods [{}, {}]; estimation impossible",
            cfg.t_min, cfg.t_max
        )));
    }
    Ok((enriched, report))
}

/// Physical position shared by a neighborhood.
pub type Position = (i64, u8);

/// Locations grouped by shared `(cabinet, cage_pos)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NeighborhoodMap {
    clusters: BTreeMap<Position, Vec<u32>>,
    membership: Vec<Vec<Position>>,
}

impl NeighborhoodMap {
    fn build(n_locations: usize, records: &[EnrichedRecord]) -> Self {
        let mut sets: BTreeMap<Position, BTreeSet<u32>> = BTreeMap::new();
        for r in records {
            sets.entry(r.position()).or_default().insert(r.location);
        }
        let mut membership = vec![Vec::new(); n_locations];
        let clusters = sets
            .into_iter()
            .map(|(pos, members)| {
                let members: Vec<u32> = members.into_iter().collect();
                for &m in &members {
                    membership[m as usize].push(pos);
                }
                (pos, members)
            })
            .collect();
        Self {
            clusters,
            membership,
        }
    }

    /// Neighbor location indices of `location` (self excluded).
    pub fn neighbors(&self, location: u32) -> BTreeSet<u32> {
        self.membership
            .get(location as usize)
            .into_iter()
            .flatten()
            .flat_map(|pos| self.clusters[pos].iter().copied())
            .filter(|&j| j != location)
            .collect()
    }

    pub fn clusters(&self) -> impl Iterator<Item = (&Position, &[u32])> {
        self.clusters.iter().map(|(p, m)| (p, m.as_slice()))
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }
}

/// A panel record with its derived spatial columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnrichedRecord {
    /// Index into [`EnrichedPanel::location_ids`].
    pub location: u32,
    pub period: i64,
    pub cabinet: i64,
    pub cage_pos: u8,
    pub age_quarters: u32,
    pub fail: bool,
    pub replace: bool,
    /// Some neighbor replaced at `t - 1`.
    pub n_lag: bool,
    /// Neighbors failing at `t`, self excluded.
    pub f_cage: u32,
    /// Neighbors failing at `t - 1` among those observed at `t - 1`.
    pub f_lag: u32,
    /// This location's own decision at `t - 1`, when observed.
    pub prev_replace: Option<bool>,
}

impl EnrichedRecord {
    pub fn position(&self) -> Position {
        (self.cabinet, self.cage_pos)
    }
}

/// A panel with derived spatial columns, sorted by `(location, period)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnrichedPanel {
    location_ids: Arc<[String]>,
    records: Vec<EnrichedRecord>,
    neighborhoods: NeighborhoodMap,
}

#[derive(Clone, Copy, Default)]
struct GroupCounts {
    replace: u32,
    fail: u32,
}

fn group_counts(records: &[EnrichedRecord]) -> HashMap<(i64, u8, i64), GroupCounts> {
    let mut groups: HashMap<(i64, u8, i64), GroupCounts> = HashMap::new();
    for r in records {
        let g = groups.entry((r.cabinet, r.cage_pos, r.period)).or_default();
        g.replace += u32::from(r.replace);
        g.fail += u32::from(r.fail);
    }
    groups
}

/// Computes `n_lag`, `f_cage`, `f_lag` and `prev_replace` for every record.
/// Missing neighbor records contribute nothing.
pub fn enrich(panel: &Panel) -> EnrichedPanel {
    let ids: BTreeSet<&str> = panel.records.iter().map(|r| r.location_id.as_str()).collect();
    let index: HashMap<&str, u32> = ids.iter().enumerate().map(|(i, &s)| (s, i as u32)).collect();
    let location_ids: Arc<[String]> = ids.iter().map(|s| s.to_string()).collect();
    let records: Vec<EnrichedRecord> = panel
        .records
        .iter()
        .map(|r| EnrichedRecord {
            location: index[r.location_id.as_str()],
            period: r.period,
            cabinet: r.cabinet,
            cage_pos: r.cage_pos,
            age_quarters: r.age_quarters,
            fail: r.fail,
            replace: r.replace,
            n_lag: false,
            f_cage: 0,
            f_lag: 0,
            prev_replace: None,
        })
        .collect();
    EnrichedPanel::from_sorted(location_ids, records)
}

impl EnrichedPanel {
    /// Builds a panel from records already sorted by `(location, period)`,
    /// recomputing all derived columns from those records alone.
    pub(crate) fn from_sorted(location_ids: Arc<[String]>, mut records: Vec<EnrichedRecord>) -> Self {
        let groups = group_counts(&records);
        let zero = GroupCounts::default();
        for i in 0..records.len() {
            let r = records[i];
            let prev = (i > 0)
                .then(|| records[i - 1])
                .filter(|p| p.location == r.location && p.period + 1 == r.period);
            let same_pos_prev = prev.filter(|p| p.position() == r.position());
            let now = groups.get(&(r.cabinet, r.cage_pos, r.period)).unwrap_or(&zero);
            let lag = groups
                .get(&(r.cabinet, r.cage_pos, r.period - 1))
                .unwrap_or(&zero);
            let own_lag_replace = same_pos_prev.is_some_and(|p| p.replace);
            let own_lag_fail = same_pos_prev.is_some_and(|p| p.fail);
            let rec = &mut records[i];
            rec.n_lag = lag.replace - u32::from(own_lag_replace) >= 1;
            rec.f_cage = now.fail - u32::from(r.fail);
            rec.f_lag = lag.fail - u32::from(own_lag_fail);
            rec.prev_replace = prev.map(|p| p.replace);
        }
        Self::assemble(location_ids, records)
    }

    /// Wraps records whose derived columns are already set.
    pub(crate) fn assemble(location_ids: Arc<[String]>, records: Vec<EnrichedRecord>) -> Self {
        let neighborhoods = NeighborhoodMap::build(location_ids.len(), &records);
        Self {
            location_ids,
            records,
            neighborhoods,
        }
    }

    pub fn records(&self) -> &[EnrichedRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn location_ids(&self) -> &Arc<[String]> {
        &self.location_ids
    }

    pub fn location_id(&self, location: u32) -> &str {
        &self.location_ids[location as usize]
    }

    pub fn neighborhoods(&self) -> &NeighborhoodMap {
        &self.neighborhoods
    }

    /// Inclusive `(first, last)` period, `None` when empty.
    pub fn period_range(&self) -> Option<(i64, i64)> {
        let min = self.records.iter().map(|r| r.period).min()?;
        let max = self.records.iter().map(|r| r.period).max()?;
        Some((min, max))
    }

    /// Keeps records inside `[t_min, t_max]` without touching derived columns.
    pub fn restrict_window(&self, t_min: i64, t_max: i64) -> Self {
        let records = self
            .records
            .iter()
            .filter(|r| (t_min..=t_max).contains(&r.period))
            .copied()
            .collect();
        Self::assemble(self.location_ids.clone(), records)
    }

    /// Drops the derived columns.
    pub fn to_panel(&self) -> Panel {
        Panel {
            records: self
                .records
                .iter()
                .map(|r| PanelRecord {
                    location_id: self.location_id(r.location).to_string(),
                    period: r.period,
                    cabinet: r.cabinet,
                    cage_pos: r.cage_pos,
                    age_quarters: r.age_quarters,
                    fail: r.fail,
                    replace: r.replace,
                })
                .collect(),
        }
    }

    pub fn replacement_rate(&self) -> f64 {
        let n1 = self.records.iter().filter(|r| r.replace).count();
        n1 as f64 / self.records.len().max(1) as f64
    }

    /// Mean `f_cage`, overall and per cage position.
    pub fn mean_f_cage(&self) -> (f64, [f64; N_CAGES]) {
        let mut sum = [0u64; N_CAGES];
        let mut n = [0u64; N_CAGES];
        for r in &self.records {
            sum[r.cage_pos as usize] += u64::from(r.f_cage);
            n[r.cage_pos as usize] += 1;
        }
        let total = sum.iter().sum::<u64>() as f64 / n.iter().sum::<u64>().max(1) as f64;
        let by_cage = std::array::from_fn(|k| {
            if n[k] == 0 {
                total
            } else {
                sum[k] as f64 / n[k] as f64
            }
        });
        (total, by_cage)
    }
}

/// Share of records at which at least one neighbor replaces in the same
/// period, i.e. the frequency of `n_lag = 1` one period ahead.
pub fn estimate_p_nbr(panel: &EnrichedPanel) -> Result<f64> {
    let (total, _) = p_nbr_counts(panel)?;
    Ok(total)
}

/// [`estimate_p_nbr`] split by cage position. Empty cages fall back to the
/// overall frequency.
pub fn estimate_p_nbr_by_cage(panel: &EnrichedPanel) -> Result<[f64; N_CAGES]> {
    Ok(p_nbr_counts(panel)?.1)
}

fn p_nbr_counts(panel: &EnrichedPanel) -> Result<(f64, [f64; N_CAGES])> {
    if panel.is_empty() {
        return Err(Error::EmptySample("cannot estimate p_nbr on an empty panel".into()));
    }
    let groups = group_counts(&panel.records);
    let mut hits = [0u64; N_CAGES];
    let mut n = [0u64; N_CAGES];
    for r in &panel.records {
        let g = groups[&(r.cabinet, r.cage_pos, r.period)];
        let k = r.cage_pos as usize;
        n[k] += 1;
        if g.replace - u32::from(r.replace) >= 1 {
            hits[k] += 1;
        }
    }
    let total = hits.iter().sum::<u64>() as f64 / n.iter().sum::<u64>() as f64;
    let by_cage = std::array::from_fn(|k| {
        if n[k] == 0 {
            total
        } else {
            hits[k] as f64 / n[k] as f64
        }
    });
    Ok((total, by_cage))
}

/// Headline counts for the `ingest` report.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelSummary {
    pub records: usize,
    pub locations: usize,
    pub neighborhoods: usize,
    pub first_period: i64,
    pub last_period: i64,
    pub replacement_rate: f64,
    pub failure_rate: f64,
    pub n_lag_rate: f64,
    pub mean_f_cage: f64,
}

impl PanelSummary {
    pub fn of(panel: &EnrichedPanel) -> Option<Self> {
        let (first_period, last_period) = panel.period_range()?;
        let n = panel.len() as f64;
        let count = |f: fn(&EnrichedRecord) -> bool| panel.records.iter().filter(|r| f(r)).count() as f64;
        Some(Self {
            records: panel.len(),
            locations: panel
                .records
                .iter()
                .map(|r| r.location)
                .collect::<HashSet<_>>()
                .len(),
            neighborhoods: panel.neighborhoods.n_clusters(),
            first_period,
            last_period,
            replacement_rate: count(|r| r.replace) / n,
            failure_rate: count(|r| r.fail) / n,
            n_lag_rate: count(|r| r.n_lag) / n,
            mean_f_cage: panel.mean_f_cage().0,
        })
    }
}
