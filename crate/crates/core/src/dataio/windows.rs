use super::{format_timestamp, LabeledSeries};
use crate::error::{Error, Result};
use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

/// `(input, target)` pairs: `history_len` minutes of load followed by the
/// next `horizon` minutes of charging labels. Stored flat, row per window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    history_len: usize,
    horizon: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
    home_ids: Vec<Arc<str>>,
    starts: Vec<usize>,
    start_times: Vec<NaiveDateTime>,
}

impl WindowSet {
    pub fn empty(history_len: usize, horizon: usize) -> Self {
        WindowSet {
            history_len,
            horizon,
            inputs: Vec::new(),
            targets: Vec::new(),
            home_ids: Vec::new(),
            starts: Vec::new(),
            start_times: Vec::new(),
        }
    }

    pub fn history_len(&self) -> usize {
        self.history_len
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.history_len..(i + 1) * self.history_len]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.horizon..(i + 1) * self.horizon]
    }

    pub fn home_id(&self, i: usize) -> &str {
        &self.home_ids[i]
    }

    /// Index of the window's first input minute in its source series.
    pub fn start(&self, i: usize) -> usize {
        self.starts[i]
    }

    pub fn start_time(&self, i: usize) -> NaiveDateTime {
        self.start_times[i]
    }

    pub fn extend(&mut self, other: WindowSet) -> Result<()> {
        if (other.history_len, other.horizon) != (self.history_len, self.horizon) {
            return Err(Error::dim(
                "WindowSet::extend",
                &[self.history_len, self.horizon],
                &[other.history_len, other.horizon],
            ));
        }
        self.inputs.extend(other.inputs);
        self.targets.extend(other.targets);
        self.home_ids.extend(other.home_ids);
        self.starts.extend(other.starts);
        self.start_times.extend(other.start_times);
        Ok(())
    }

    /// Windows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> WindowSet {
        let mut out = WindowSet::empty(self.history_len, self.horizon);
        for &i in indices {
            out.inputs.extend_from_slice(self.input(i));
            out.targets.extend_from_slice(self.target(i));
            out.home_ids.push(self.home_ids[i].clone());
            out.starts.push(self.starts[i]);
            out.start_times.push(self.start_times[i]);
        }
        out
    }

    /// Splits each home's windows (kept in start order) so the last
    /// `tail_fraction` of them land in the second set.
    pub fn split_tail_per_home(&self, tail_fraction: f64) -> (WindowSet, WindowSet) {
        let mut by_home: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for i in 0..self.len() {
            by_home.entry(self.home_id(i)).or_default().push(i);
        }
        let (mut head, mut tail) = (Vec::new(), Vec::new());
        for idx in by_home.values() {
            let n_tail = (idx.len() as f64 * tail_fraction).floor() as usize;
            let cut = idx.len() - n_tail;
            head.extend_from_slice(&idx[..cut]);
            tail.extend_from_slice(&idx[cut..]);
        }
        (self.select(&head), self.select(&tail))
    }

    pub fn positive_fraction(&self) -> f64 {
        if self.targets.is_empty() {
            return 0.0;
        }
        self.targets.iter().sum::<f64>() / self.targets.len() as f64
    }
}

/// Emits a window at every `s ≡ 0 (mod window_stride)` whose span
/// `[s, s + history_len + horizon)` contains no minute gap.
pub fn build_windows(
    series: &LabeledSeries,
    history_len: usize,
    horizon: usize,
    window_stride: usize,
) -> Result<WindowSet> {
    if history_len == 0 || horizon == 0 || window_stride == 0 {
        return Err(Error::Config(format!(
            "window lengths and stride must be positive (T={history_len}, M={horizon}, stride={window_stride})"
        )));
    }
    let span = history_len + horizon;
    let home: Arc<str> = Arc::from(series.home_id.as_str());
    let mut out = WindowSet::empty(history_len, horizon);
    let n = series.len();
    if n < span {
        return Ok(out);
    }
    for s in (0..=n - span).step_by(window_stride) {
        // a gap at index g breaks continuity between g-1 and g
        let next_gap = series.gaps.partition_point(|&g| g <= s);
        if series.gaps.get(next_gap).is_some_and(|&g| g < s + span) {
            continue;
        }
        out.inputs.extend_from_slice(&series.loads[s..s + history_len]);
        out.targets.extend(
            series.labels[s + history_len..s + span]
                .iter()
                .map(|&l| f64::from(l)),
        );
        out.home_ids.push(home.clone());
        out.starts.push(s);
        out.start_times.push(series.timestamps[s]);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomeStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-home z-score statistics from training data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scaler {
    pub homes: BTreeMap<String, HomeStats>,
}

pub const MIN_STD: f64 = 1e-6;

pub fn fit_scaler(train: &[LabeledSeries]) -> Result<Scaler> {
    if train.is_empty() {
        return Err(Error::Empty("no training series to fit a scaler on".into()));
    }
    let mut homes = BTreeMap::new();
    for s in train {
        if s.is_empty() {
            return Err(Error::Empty(format!("home {} has no training load", s.home_id)));
        }
        let n = s.len() as f64;
        let mean = s.loads.iter().sum::<f64>() / n;
        let var = s.loads.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        homes.insert(
            s.home_id.clone(),
            HomeStats {
                mean,
                std: var.sqrt().max(MIN_STD),
            },
        );
    }
    Ok(Scaler { homes })
}

impl Scaler {
    pub fn stats(&self, home_id: &str) -> Result<HomeStats> {
        self.homes
            .get(home_id)
            .copied()
            .ok_or_else(|| Error::Schema(format!("no scaler statistics for home {home_id}")))
    }
}

/// Z-scores each window's input with its home's statistics. Targets are
/// untouched.
pub fn apply_scaler(windows: &WindowSet, scaler: &Scaler) -> Result<WindowSet> {
    let mut out = windows.clone();
    let t = windows.history_len;
    for i in 0..windows.len() {
        let stats = scaler.stats(windows.home_id(i))?;
        for v in &mut out.inputs[i * t..(i + 1) * t] {
            *v = (*v - stats.mean) / stats.std;
        }
    }
    Ok(out)
}

/// Plain-text export: `home_id,window_start,start_index,x_1..x_T,y_1..y_M`.
pub fn write_windows<W: Write>(windows: &WindowSet, mut out: W) -> Result<()> {
    write!(out, "home_id,window_start,start_index")?;
    for t in 1..=windows.history_len {
        write!(out, ",x_{t}")?;
    }
    for m in 1..=windows.horizon {
        write!(out, ",y_{m}")?;
    }
    writeln!(out)?;
    for i in 0..windows.len() {
        write!(
            out,
            "{},{},{}",
            windows.home_id(i),
            format_timestamp(&windows.start_time(i)),
            windows.start(i)
        )?;
        for v in windows.input(i) {
            write!(out, ",{v}")?;
        }
        for v in windows.target(i) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeDelta;
    use proptest::prelude::*;

    fn series(n: usize, gaps: Vec<usize>) -> LabeledSeries {
        let start = super::super::parse_timestamp("2018-01-01T00:00").unwrap();
        LabeledSeries {
            home_id: "h".into(),
            timestamps: (0..n).map(|i| start + TimeDelta::minutes(i as i64)).collect(),
            loads: (0..n).map(|i| i as f64).collect(),
            labels: (0..n).map(|i| u8::from(i % 7 == 0)).collect(),
            gaps,
            labeled: true,
        }
    }

    // every start s on the stride grid whose span avoids all gaps
    fn brute_force_starts(n: usize, gaps: &[usize], t: usize, m: usize, stride: usize) -> Vec<usize> {
        let mut starts = Vec::new();
        let mut s = 0;
        while s + t + m <= n {
            let ok = (s + 1..s + t + m).all(|i| !gaps.contains(&i));
            if ok {
                starts.push(s);
            }
            s += stride;
        }
        starts
    }

    #[test]
    fn gap_free_counts() {
        let s = series(200, vec![]);
        assert_eq!(build_windows(&s, 180, 10, 1).unwrap().len(), 11);
        let w = build_windows(&s, 180, 10, 5).unwrap();
        assert_eq!((0..w.len()).map(|i| w.start(i)).collect::<Vec<_>>(), vec![0, 5, 10]);
        assert!(build_windows(&series(100, vec![]), 180, 10, 1).unwrap().is_empty());
    }

    #[test]
    fn gap_at_100_matches_enumeration() {
        let s = series(300, vec![100]);
        let w = build_windows(&s, 180, 10, 1).unwrap();
        let expected = brute_force_starts(300, &[100], 180, 10, 1);
        assert_eq!(expected.len(), 11);
        assert_eq!((0..w.len()).map(|i| w.start(i)).collect::<Vec<_>>(), expected);
    }

    #[test]
    fn windows_reconstruct_from_source() {
        let s = series(60, vec![20]);
        let w = build_windows(&s, 10, 3, 2).unwrap();
        for i in 0..w.len() {
            let st = w.start(i);
            assert_eq!(w.input(i), &s.loads[st..st + 10]);
            let labels: Vec<f64> = s.labels[st + 10..st + 13].iter().map(|&l| f64::from(l)).collect();
            assert_eq!(w.target(i), labels.as_slice());
            assert_eq!(w.start_time(i), s.timestamps[st]);
        }
    }

    #[test]
    fn scaler_cases() {
        let mut c = series(4, vec![]);
        c.loads = vec![1.0; 4];
        let sc = fit_scaler(&[c.clone()]).unwrap();
        assert_eq!(sc.stats("h").unwrap().std, MIN_STD);
        let w = apply_scaler(&build_windows(&c, 2, 1, 1).unwrap(), &sc).unwrap();
        assert!(w.input(0).iter().all(|v| *v == 0.0));

        let mut two = series(2, vec![]);
        two.loads = vec![0.0, 2.0];
        let sc = fit_scaler(&[two.clone()]).unwrap();
        assert_eq!(sc.stats("h").unwrap(), HomeStats { mean: 1.0, std: 1.0 });
        let w = apply_scaler(&build_windows(&two, 1, 1, 1).unwrap(), &sc).unwrap();
        assert_eq!(w.input(0), &[-1.0]);

        let mut empty = series(0, vec![]);
        empty.loads.clear();
        assert!(fit_scaler(&[empty]).is_err());
        assert!(fit_scaler(&[]).is_err());
    }

    #[test]
    fn scaler_ignores_test_data() {
        let s = series(50, vec![]);
        let (train, mut test) = (s.slice(0..40), s.slice(40..50));
        let before = fit_scaler(std::slice::from_ref(&train)).unwrap();
        for v in &mut test.loads {
            *v *= 100.0;
        }
        assert_eq!(fit_scaler(&[train]).unwrap(), before);
        let w = apply_scaler(&build_windows(&test, 5, 1, 1).unwrap(), &before).unwrap();
        let mean: f64 = (0..w.len()).flat_map(|i| w.input(i).to_vec()).sum::<f64>();
        assert!(mean.abs() > 1.0);
    }

    #[test]
    fn tail_split_is_per_home() {
        let mut a = build_windows(&series(30, vec![]), 5, 1, 1).unwrap();
        let mut other = series(30, vec![]);
        other.home_id = "g".into();
        a.extend(build_windows(&other, 5, 1, 1).unwrap()).unwrap();
        let (head, tail) = a.split_tail_per_home(0.1);
        assert_eq!(tail.len(), 4);
        assert_eq!(head.len() + tail.len(), a.len());
        assert_eq!(tail.start(0), 23);
        assert_eq!(tail.home_id(2), "h");
    }

    #[test]
    fn export_has_one_row_per_window() {
        let w = build_windows(&series(20, vec![]), 4, 2, 3).unwrap();
        let mut buf = Vec::new();
        write_windows(&w, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), w.len() + 1);
        assert!(text.starts_with("home_id,window_start,start_index,x_1,x_2,x_3,x_4,y_1,y_2\n"));
    }

    proptest! {
        #[test]
        fn gap_free_count_formula(n in 1usize..400, t in 1usize..50, m in 1usize..20, stride in 1usize..9) {
            let w = build_windows(&series(n, vec![]), t, m, stride).unwrap();
            let expected = if n >= t + m { (n - t - m) / stride + 1 } else { 0 };
            prop_assert_eq!(w.len(), expected);
        }

        #[test]
        fn gapped_count_matches_enumeration(
            n in 20usize..200,
            gaps in proptest::collection::btree_set(1usize..200, 0..5),
            t in 1usize..30,
            m in 1usize..10,
            stride in 1usize..5,
        ) {
            let gaps: Vec<usize> = gaps.into_iter().filter(|&g| g < n).collect();
            let w = build_windows(&series(n, gaps.clone()), t, m, stride).unwrap();
            let starts: Vec<usize> = (0..w.len()).map(|i| w.start(i)).collect();
            prop_assert_eq!(starts, brute_force_starts(n, &gaps, t, m, stride));
        }
    }
}
