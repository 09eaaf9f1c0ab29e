//! Helpers shared by the integration tests.
#![allow(dead_code)]

use spatial_ddc::moments::{MomentCounts, MomentVector, PairSums, Rate};
use spatial_ddc::panel::{Panel, PanelRecord};
use spatial_ddc::rng::Stream;

/// A random panel of at most `max_units` locations and `max_periods`
/// periods, with gaps, entries, exits and an occasional mover.
pub fn random_panel(rng: &mut Stream, max_units: u64, max_periods: u64) -> Panel {
    random_panel_with(rng, max_units, max_periods, true)
}

pub fn random_panel_with(rng: &mut Stream, max_units: u64, max_periods: u64, movers: bool) -> Panel {
    let n_units = 1 + rng.below(max_units);
    let n_periods = 1 + rng.below(max_periods);
    let n_cabinets = 1 + rng.below(3);
    let p_fail = rng.uniform() * 0.6;
    let p_replace = rng.uniform() * 0.6;
    let t0 = rng.below(5) as i64 - 2;
    let mut records = Vec::new();
    for u in 0..n_units {
        let mut cabinet = 1 + rng.below(n_cabinets) as i64;
        let mut cage = rng.below(3) as u8;
        let mover = rng.uniform() < 0.05 && movers;
        for t in 0..n_periods as i64 {
            if rng.uniform() < 0.15 {
                continue;
            }
            if mover && rng.uniform() < 0.3 {
                cabinet = 1 + rng.below(n_cabinets) as i64;
                cage = rng.below(3) as u8;
            }
            records.push(PanelRecord {
                location_id: format!("u{u:03}"),
                period: t0 + t,
                cabinet,
                cage_pos: cage,
                age_quarters: 0,
                fail: rng.uniform() < p_fail,
                replace: rng.uniform() < p_replace,
            });
        }
    }
    Panel::from_records(records).expect("generated panel is valid")
}

/// Moments by direct enumeration over the raw records: every neighbor
/// relation is found by scanning the whole panel.
pub fn brute_force_moments(panel: &Panel) -> MomentVector {
    let recs = panel.records();
    let same_pos = |a: &PanelRecord, b: &PanelRecord| a.cabinet == b.cabinet && a.cage_pos == b.cage_pos;
    let mut c = MomentCounts::default();
    for r in recs {
        let others = |dt: i64| {
            recs.iter()
                .filter(move |q| q.location_id != r.location_id && q.period == r.period + dt && same_pos(q, r))
        };
        let own_prev = recs
            .iter()
            .find(|q| q.location_id == r.location_id && q.period == r.period - 1);
        let f_cage = others(0).filter(|q| q.fail).count();
        let f_lag = others(-1).filter(|q| q.fail).count();
        let push = |rate: &mut Rate| {
            rate.n += 1;
            rate.hits += u64::from(r.replace);
        };
        if own_prev.is_some_and(|q| q.replace) {
            push(&mut c.m1);
        }
        if !r.fail {
            push(if f_lag >= 1 { &mut c.m3_treated } else { &mut c.m3_control });
            push(if f_cage >= 1 { &mut c.m4_treated } else { &mut c.m4_control });
        }
        for (dt, sums) in [(1, &mut c.lead_pairs), (-1, &mut c.lag_pairs)] {
            for q in others(dt) {
                let (x, y) = (u64::from(r.replace), u64::from(q.replace));
                sums.n += 1;
                sums.sum_x += x;
                sums.sum_y += y;
                sums.sum_xy += x * y;
            }
        }
    }
    let rate = |r: Rate| (r.n > 0).then(|| r.hits as f64 / r.n as f64);
    let corr = |p: PairSums| {
        // Textbook computational form; Σx² = Σx for 0/1 data.
        let (n, sx, sy, sxy) = (p.n as f64, p.sum_x as f64, p.sum_y as f64, p.sum_xy as f64);
        let (sxx, syy) = (sx, sy);
        let den = ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
        (p.n > 0 && n * sxx - sx * sx > 0.0 && n * syy - sy * sy > 0.0).then(|| (n * sxy - sx * sy) / den)
    };
    let diff = |a: Rate, b: Rate| Some(rate(a)? - rate(b)?);
    MomentVector {
        m1: rate(c.m1),
        m2: corr(c.lead_pairs).zip(corr(c.lag_pairs)).map(|(a, b)| a - b),
        m3: diff(c.m3_treated, c.m3_control),
        m4: diff(c.m4_treated, c.m4_control),
        counts: c,
    }
}
