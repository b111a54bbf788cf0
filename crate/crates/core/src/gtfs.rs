//! GTFS static feed handling: parse a feed restricted to one service day,
//! and append virtual-service rows to a copy of a base feed.
//!
//! Only the subset of GTFS needed here is modeled: stops, routes, trips,
//! stop_times, calendar/calendar_dates and frequencies (expanded to plain
//! trips at parse time). Everything else is carried through verbatim when
//! writing.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};

use crate::error::{Error, Result};

/// Parses `HH:MM:SS` into seconds since midnight. Hours may exceed 23,
/// per the GTFS convention for post-midnight stoptimes.
pub fn parse_hms(s: &str) -> Result<u32> {
    let bad = || Error::InvalidParameter(format!("bad time of day `{s}`, expected HH:MM:SS"));
    let mut parts = s.trim().split(':');
    let (h, m, sec) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some(h), Some(m), Some(sec), None) => (h, m, sec),
        _ => return Err(bad()),
    };
    let h: u32 = h.parse().map_err(|_| bad())?;
    let m: u32 = m.parse().map_err(|_| bad())?;
    let sec: u32 = sec.parse().map_err(|_| bad())?;
    if m > 59 || sec > 59 {
        return Err(bad());
    }
    Ok(h * 3600 + m * 60 + sec)
}

/// Formats seconds since midnight as zero-padded `HH:MM:SS` (hours may
/// exceed 23).
pub fn format_hms(t: u32) -> String {
    format!("{:02}:{:02}:{:02}", t / 3600, (t % 3600) / 60, t % 60)
}

/// Upper bound on stoptime clock values: two service days.
pub const MAX_STOPTIME_S: u32 = 172_800;

#[derive(Debug, Clone, PartialEq)]
pub struct Stop {
    pub stop_id: String,
    pub name: String,
    pub lon: f64,
    pub lat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StopTime {
    pub stop_id: String,
    pub arrival_s: u32,
    pub departure_s: u32,
    pub seq: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trip {
    pub trip_id: String,
    pub route_id: String,
    pub service_id: String,
    pub stop_times: Vec<StopTime>,
}

/// A feed reduced to the trips running on one service day.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Schedule {
    pub stops: BTreeMap<String, Stop>,
    pub route_ids: BTreeSet<String>,
    /// Active trips, sorted by trip_id, stoptimes sorted by stop_sequence.
    pub trips: Vec<Trip>,
    pub service_date: String,
}

/// One loaded CSV table with header-name lookup.
struct Table {
    path: PathBuf,
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Table> {
        let ctx = || format!("reading {}", path.display());
        let mut rdr = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(path)
            .map_err(|e| Error::csv(ctx(), e))?;
        let mut headers: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::csv(ctx(), e))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        if let Some(first) = headers.first_mut() {
            // Some feeds ship a UTF-8 BOM on the first header cell.
            *first = first.trim_start_matches('\u{feff}').to_string();
        }
        let rows = rdr
            .records()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::csv(ctx(), e))?;
        Ok(Table {
            path: path.to_path_buf(),
            headers,
            rows,
        })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                path: self.path.clone(),
                column: name.to_string(),
            })
    }

    fn opt_col(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    fn get<'a>(&self, row: &'a csv::StringRecord, idx: usize) -> &'a str {
        row.get(idx).unwrap_or("").trim()
    }

    fn format_err(&self, row_no: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            message: format!("row {}: {}", row_no, message.into()),
        }
    }
}

fn weekday_column(date: NaiveDate) -> &'static str {
    match date.weekday() {
        chrono::Weekday::Mon => "monday",
        chrono::Weekday::Tue => "tuesday",
        chrono::Weekday::Wed => "wednesday",
        chrono::Weekday::Thu => "thursday",
        chrono::Weekday::Fri => "friday",
        chrono::Weekday::Sat => "saturday",
        chrono::Weekday::Sun => "sunday",
    }
}

/// Service ids active on `date`, plus the universe of all declared ids.
fn resolve_services(
    dir: &Path,
    date_str: &str,
    date: NaiveDate,
) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    let calendar_path = dir.join("calendar.txt");
    let dates_path = dir.join("calendar_dates.txt");
    if !calendar_path.exists() && !dates_path.exists() {
        return Err(Error::MissingArtifact(calendar_path));
    }

    let mut known = BTreeSet::new();
    let mut active = BTreeSet::new();

    if calendar_path.exists() {
        let t = Table::read(&calendar_path)?;
        let sid = t.col("service_id")?;
        let day = t.col(weekday_column(date))?;
        let start = t.col("start_date")?;
        let end = t.col("end_date")?;
        for (i, row) in t.rows.iter().enumerate() {
            let id = t.get(row, sid).to_string();
            // YYYYMMDD strings order correctly lexicographically.
            let in_window = t.get(row, start) <= date_str && date_str <= t.get(row, end);
            let runs = t.get(row, day) == "1";
            if id.is_empty() {
                return Err(t.format_err(i + 2, "empty service_id"));
            }
            if in_window && runs {
                active.insert(id.clone());
            }
            known.insert(id);
        }
    }

    if dates_path.exists() {
        let t = Table::read(&dates_path)?;
        let sid = t.col("service_id")?;
        let d = t.col("date")?;
        let ex = t.col("exception_type")?;
        for (i, row) in t.rows.iter().enumerate() {
            let id = t.get(row, sid).to_string();
            known.insert(id.clone());
            if t.get(row, d) != date_str {
                continue;
            }
            match t.get(row, ex) {
                "1" => {
                    active.insert(id);
                }
                "2" => {
                    active.remove(&id);
                }
                other => {
                    return Err(t.format_err(i + 2, format!("bad exception_type `{other}`")));
                }
            }
        }
    }

    Ok((active, known))
}

/// Loads the feed in `dir` restricted to trips running on `service_date`
/// (`YYYYMMDD`). Frequency-based trips are expanded into explicit trips
/// named `<trip_id>#<n>`.
pub fn parse_gtfs(dir: &Path, service_date: &str) -> Result<Schedule> {
    let date = NaiveDate::parse_from_str(service_date, "%Y%m%d").map_err(|_| {
        Error::InvalidParameter(format!("bad service date `{service_date}`, expected YYYYMMDD"))
    })?;

    for required in ["stops.txt", "routes.txt", "trips.txt", "stop_times.txt"] {
        let p = dir.join(required);
        if !p.exists() {
            return Err(Error::MissingArtifact(p));
        }
    }

    let mut stops = BTreeMap::new();
    {
        let t = Table::read(&dir.join("stops.txt"))?;
        let sid = t.col("stop_id")?;
        let lat = t.col("stop_lat")?;
        let lon = t.col("stop_lon")?;
        let name = t.opt_col("stop_name");
        for (i, row) in t.rows.iter().enumerate() {
            let stop = Stop {
                stop_id: t.get(row, sid).to_string(),
                name: name.map(|n| t.get(row, n).to_string()).unwrap_or_default(),
                lon: t
                    .get(row, lon)
                    .parse()
                    .map_err(|_| t.format_err(i + 2, "bad stop_lon"))?,
                lat: t
                    .get(row, lat)
                    .parse()
                    .map_err(|_| t.format_err(i + 2, "bad stop_lat"))?,
            };
            if stop.stop_id.is_empty() {
                return Err(t.format_err(i + 2, "empty stop_id"));
            }
            if stops.insert(stop.stop_id.clone(), stop.clone()).is_some() {
                return Err(Error::DuplicateStopId(stop.stop_id));
            }
        }
    }

    let mut route_ids = BTreeSet::new();
    {
        let t = Table::read(&dir.join("routes.txt"))?;
        let rid = t.col("route_id")?;
        for row in &t.rows {
            route_ids.insert(t.get(row, rid).to_string());
        }
    }

    let (active_services, known_services) = resolve_services(dir, service_date, date)?;

    // All declared trips (for foreign-key checks), active ones kept.
    let mut all_trip_ids = BTreeSet::new();
    let mut trips: BTreeMap<String, Trip> = BTreeMap::new();
    {
        let t = Table::read(&dir.join("trips.txt"))?;
        let rid = t.col("route_id")?;
        let sid = t.col("service_id")?;
        let tid = t.col("trip_id")?;
        for (i, row) in t.rows.iter().enumerate() {
            let trip_id = t.get(row, tid).to_string();
            let route_id = t.get(row, rid).to_string();
            let service_id = t.get(row, sid).to_string();
            if !route_ids.contains(&route_id) {
                return Err(Error::DanglingKey {
                    kind: "route_id",
                    key: route_id,
                });
            }
            if !known_services.contains(&service_id) {
                return Err(Error::DanglingKey {
                    kind: "service_id",
                    key: service_id,
                });
            }
            if !all_trip_ids.insert(trip_id.clone()) {
                return Err(t.format_err(i + 2, format!("duplicate trip_id `{trip_id}`")));
            }
            if active_services.contains(&service_id) {
                trips.insert(
                    trip_id.clone(),
                    Trip {
                        trip_id,
                        route_id,
                        service_id,
                        stop_times: Vec::new(),
                    },
                );
            }
        }
    }

    {
        let t = Table::read(&dir.join("stop_times.txt"))?;
        let tid = t.col("trip_id")?;
        let arr = t.col("arrival_time")?;
        let dep = t.col("departure_time")?;
        let sid = t.col("stop_id")?;
        let seq = t.col("stop_sequence")?;
        for (i, row) in t.rows.iter().enumerate() {
            let trip_id = t.get(row, tid);
            if !all_trip_ids.contains(trip_id) {
                return Err(Error::DanglingKey {
                    kind: "trip_id",
                    key: trip_id.to_string(),
                });
            }
            let stop_id = t.get(row, sid);
            if !stops.contains_key(stop_id) {
                return Err(Error::DanglingKey {
                    kind: "stop_id",
                    key: stop_id.to_string(),
                });
            }
            let Some(trip) = trips.get_mut(trip_id) else {
                continue; // inactive on this service day
            };
            let st = StopTime {
                stop_id: stop_id.to_string(),
                arrival_s: parse_hms(t.get(row, arr))
                    .map_err(|e| t.format_err(i + 2, e.to_string()))?,
                departure_s: parse_hms(t.get(row, dep))
                    .map_err(|e| t.format_err(i + 2, e.to_string()))?,
                seq: t
                    .get(row, seq)
                    .parse()
                    .map_err(|_| t.format_err(i + 2, "bad stop_sequence"))?,
            };
            if st.arrival_s > st.departure_s {
                return Err(t.format_err(i + 2, "departure before arrival"));
            }
            if st.departure_s >= MAX_STOPTIME_S {
                return Err(t.format_err(i + 2, "stoptime beyond 48:00:00"));
            }
            trip.stop_times.push(st);
        }
    }

    for trip in trips.values_mut() {
        trip.stop_times.sort_by_key(|st| st.seq);
        for pair in trip.stop_times.windows(2) {
            if pair[0].seq == pair[1].seq {
                return Err(Error::Format {
                    path: dir.join("stop_times.txt"),
                    message: format!(
                        "trip `{}`: duplicate stop_sequence {}",
                        trip.trip_id, pair[0].seq
                    ),
                });
            }
            if pair[0].departure_s > pair[1].arrival_s {
                return Err(Error::Format {
                    path: dir.join("stop_times.txt"),
                    message: format!("trip `{}`: stoptimes not time-ordered", trip.trip_id),
                });
            }
        }
    }
    trips.retain(|_, trip| !trip.stop_times.is_empty());

    expand_frequencies(dir, &mut trips)?;

    Ok(Schedule {
        stops,
        route_ids,
        trips: trips.into_values().collect(),
        service_date: service_date.to_string(),
    })
}

/// Replaces frequency-template trips with explicit trips spaced at the
/// declared headway, over half-open [start_time, end_time[ windows.
fn expand_frequencies(dir: &Path, trips: &mut BTreeMap<String, Trip>) -> Result<()> {
    let path = dir.join("frequencies.txt");
    if !path.exists() {
        return Ok(());
    }
    let t = Table::read(&path)?;
    let tid = t.col("trip_id")?;
    let start = t.col("start_time")?;
    let end = t.col("end_time")?;
    let headway = t.col("headway_secs")?;

    let mut windows: BTreeMap<String, Vec<(u32, u32, u32)>> = BTreeMap::new();
    for (i, row) in t.rows.iter().enumerate() {
        let trip_id = t.get(row, tid).to_string();
        if !trips.contains_key(&trip_id) {
            continue; // template inactive on this service day
        }
        let s = parse_hms(t.get(row, start)).map_err(|e| t.format_err(i + 2, e.to_string()))?;
        let e = parse_hms(t.get(row, end)).map_err(|e| t.format_err(i + 2, e.to_string()))?;
        let h: u32 = t
            .get(row, headway)
            .parse()
            .map_err(|_| t.format_err(i + 2, "bad headway_secs"))?;
        if h == 0 || e <= s {
            return Err(t.format_err(i + 2, "empty or inverted frequency window"));
        }
        windows.entry(trip_id).or_default().push((s, e, h));
    }

    for (trip_id, mut wins) in windows {
        let template = trips.remove(&trip_id).expect("checked above");
        wins.sort();
        let base = template.stop_times[0].departure_s;
        let mut n = 0usize;
        for (s, e, h) in wins {
            let mut start_t = s;
            while start_t < e {
                let shift = start_t as i64 - base as i64;
                let shifted: Vec<StopTime> = template
                    .stop_times
                    .iter()
                    .map(|st| StopTime {
                        stop_id: st.stop_id.clone(),
                        arrival_s: (st.arrival_s as i64 + shift) as u32,
                        departure_s: (st.departure_s as i64 + shift) as u32,
                        seq: st.seq,
                    })
                    .collect();
                if shifted
                    .iter()
                    .all(|st| st.departure_s < MAX_STOPTIME_S && st.arrival_s < MAX_STOPTIME_S)
                {
                    let id = format!("{trip_id}#{n}");
                    trips.insert(
                        id.clone(),
                        Trip {
                            trip_id: id,
                            route_id: template.route_id.clone(),
                            service_id: template.service_id.clone(),
                            stop_times: shifted,
                        },
                    );
                }
                n += 1;
                start_t += h;
            }
        }
    }
    Ok(())
}

/// New rows to splice into a copy of a base feed.
#[derive(Debug, Clone, Default)]
pub struct FeedAddition {
    pub stops: Vec<Stop>,
    /// (route_id, route_long_name, route_type)
    pub routes: Vec<(String, String, u32)>,
    /// (route_id, service_id, trip_id)
    pub trips: Vec<(String, String, String)>,
    /// (trip_id, arrival_s, departure_s, stop_id, stop_sequence)
    pub stop_times: Vec<(String, u32, u32, String, u32)>,
    /// (service_id, date YYYYMMDD) — calendar row active on that single day.
    pub service: Option<(String, String)>,
}

fn quote_csv(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Appends `rows` (keyed by column name) to the feed file at `path`,
/// aligning values to the existing header; creates the file with
/// `default_header` when absent.
fn append_rows(
    path: &Path,
    default_header: &[&str],
    rows: &[BTreeMap<&str, String>],
) -> Result<()> {
    let mut content = if path.exists() {
        fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?
    } else {
        format!("{}\n", default_header.join(","))
    };
    if rows.is_empty() && path.exists() {
        return Ok(());
    }
    if !content.ends_with('\n') {
        content.push('\n');
    }
    let header_line = content.lines().next().unwrap_or_default();
    let headers: Vec<String> = header_line
        .split(',')
        .map(|h| h.trim().trim_start_matches('\u{feff}').to_string())
        .collect();
    for row in rows {
        let line: Vec<String> = headers
            .iter()
            .map(|h| row.get(h.as_str()).map(|v| quote_csv(v)).unwrap_or_default())
            .collect();
        content.push_str(&line.join(","));
        content.push('\n');
    }
    fs::write(path, content).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Copies the base feed into `out_dir` and appends the given additions.
///
/// Appended rows follow each base file's own column order; files the base
/// feed lacks (calendar.txt in date-only feeds) are created with a
/// standard header. Fails on stop_id or service_id collisions.
pub fn write_augmented_feed(base_dir: &Path, out_dir: &Path, add: &FeedAddition) -> Result<()> {
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;

    let mut entries: Vec<PathBuf> = fs::read_dir(base_dir)
        .map_err(|e| Error::io(format!("listing {}", base_dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "txt"))
        .collect();
    entries.sort();
    for src in &entries {
        let dst = out_dir.join(src.file_name().expect("file entries have names"));
        fs::copy(src, &dst)
            .map_err(|e| Error::io(format!("copying {} to {}", src.display(), dst.display()), e))?;
    }

    // Collision checks against the base feed.
    let base_stops = Table::read(&base_dir.join("stops.txt"))?;
    let sid = base_stops.col("stop_id")?;
    let existing: BTreeSet<&str> = base_stops
        .rows
        .iter()
        .map(|r| base_stops.get(r, sid))
        .collect();
    for stop in &add.stops {
        if existing.contains(stop.stop_id.as_str()) {
            return Err(Error::DuplicateStopId(stop.stop_id.clone()));
        }
    }
    if let Some((service_id, _)) = &add.service {
        let cal = base_dir.join("calendar.txt");
        if cal.exists() {
            let t = Table::read(&cal)?;
            let idx = t.col("service_id")?;
            if t.rows.iter().any(|r| t.get(r, idx) == service_id) {
                return Err(Error::InvalidParameter(format!(
                    "service_id `{service_id}` already present in base calendar"
                )));
            }
        }
    }

    let stop_rows: Vec<BTreeMap<&str, String>> = add
        .stops
        .iter()
        .map(|s| {
            BTreeMap::from([
                ("stop_id", s.stop_id.clone()),
                ("stop_name", s.name.clone()),
                ("stop_lat", format!("{}", s.lat)),
                ("stop_lon", format!("{}", s.lon)),
            ])
        })
        .collect();
    append_rows(
        &out_dir.join("stops.txt"),
        &["stop_id", "stop_name", "stop_lat", "stop_lon"],
        &stop_rows,
    )?;

    let route_rows: Vec<BTreeMap<&str, String>> = add
        .routes
        .iter()
        .map(|(id, name, rt)| {
            BTreeMap::from([
                ("route_id", id.clone()),
                ("route_long_name", name.clone()),
                ("route_short_name", String::new()),
                ("route_type", rt.to_string()),
            ])
        })
        .collect();
    append_rows(
        &out_dir.join("routes.txt"),
        &["route_id", "route_short_name", "route_long_name", "route_type"],
        &route_rows,
    )?;

    let trip_rows: Vec<BTreeMap<&str, String>> = add
        .trips
        .iter()
        .map(|(route_id, service_id, trip_id)| {
            BTreeMap::from([
                ("route_id", route_id.clone()),
                ("service_id", service_id.clone()),
                ("trip_id", trip_id.clone()),
            ])
        })
        .collect();
    append_rows(
        &out_dir.join("trips.txt"),
        &["route_id", "service_id", "trip_id"],
        &trip_rows,
    )?;

    let st_rows: Vec<BTreeMap<&str, String>> = add
        .stop_times
        .iter()
        .map(|(trip_id, arr, dep, stop_id, seq)| {
            BTreeMap::from([
                ("trip_id", trip_id.clone()),
                ("arrival_time", format_hms(*arr)),
                ("departure_time", format_hms(*dep)),
                ("stop_id", stop_id.clone()),
                ("stop_sequence", seq.to_string()),
            ])
        })
        .collect();
    append_rows(
        &out_dir.join("stop_times.txt"),
        &["trip_id", "arrival_time", "departure_time", "stop_id", "stop_sequence"],
        &st_rows,
    )?;

    if let Some((service_id, date)) = &add.service {
        let row = BTreeMap::from([
            ("service_id", service_id.clone()),
            ("monday", "1".to_string()),
            ("tuesday", "1".to_string()),
            ("wednesday", "1".to_string()),
            ("thursday", "1".to_string()),
            ("friday", "1".to_string()),
            ("saturday", "1".to_string()),
            ("sunday", "1".to_string()),
            ("start_date", date.clone()),
            ("end_date", date.clone()),
        ]);
        append_rows(
            &out_dir.join("calendar.txt"),
            &[
                "service_id",
                "monday",
                "tuesday",
                "wednesday",
                "thursday",
                "friday",
                "saturday",
                "sunday",
                "start_date",
                "end_date",
            ],
            &[row],
        )?;
    }
    Ok(())
}
