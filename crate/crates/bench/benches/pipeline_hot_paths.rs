//! Hot paths: a kriging bucket solve, one routing query, point
//! location, and virtual-departure generation.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use feedergraph_core::accessibility::earliest_arrival;
use feedergraph_core::geostat::{krige, Method, VariogramFamily, VariogramModel};
use feedergraph_core::gtfs::{Schedule, Stop, StopTime, Trip};
use feedergraph_core::synth::{generate_departures, EstimateRow, FieldLookup};
use feedergraph_core::transit_graph::{
    build_graph, GraphParams, DEFAULT_MAX_WALK_S, DEFAULT_WALK_SPEED_MPS,
};
use feedergraph_core::{tessellate, CellId, Direction, Point, Projection};

fn bench_krige(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let obs: Vec<(Point, f64)> = (0..30)
        .map(|_| {
            (
                Point::new(rng.gen_range(0.0..2000.0), rng.gen_range(0.0..2000.0)),
                rng.gen_range(60.0..1800.0),
            )
        })
        .collect();
    let model = VariogramModel {
        family: VariogramFamily::Spherical,
        nugget: 20.0,
        partial_sill: 300.0,
        range: 1200.0,
    };
    let target = Point::new(977.0, 1313.0);
    c.bench_function("krige_one_target_30_obs", |b| {
        b.iter(|| krige(black_box(target), &obs, &model).unwrap())
    });
}

fn synthetic_schedule(n_stops: usize, n_trips: usize) -> Schedule {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = Schedule {
        service_date: "20240115".into(),
        ..Default::default()
    };
    for i in 0..n_stops {
        s.stops.insert(
            format!("S{i:03}"),
            Stop {
                stop_id: format!("S{i:03}"),
                name: format!("S{i:03}"),
                lon: rng.gen_range(0.0..5000.0),
                lat: rng.gen_range(0.0..5000.0),
            },
        );
    }
    s.route_ids.insert("R".into());
    for t in 0..n_trips {
        let mut time = rng.gen_range(21_600..64_800u32);
        let mut stop_times = Vec::new();
        for i in 0..rng.gen_range(3..=6) {
            let arr = time;
            let dep = arr + rng.gen_range(0..60);
            stop_times.push(StopTime {
                stop_id: format!("S{:03}", rng.gen_range(0..n_stops)),
                arrival_s: arr,
                departure_s: dep,
                seq: i + 1,
            });
            time = dep + rng.gen_range(120..600);
        }
        s.trips.push(Trip {
            trip_id: format!("T{t:04}"),
            route_id: "R".into(),
            service_id: "S".into(),
            stop_times,
        });
    }
    s.trips.sort_by(|a, b| a.trip_id.cmp(&b.trip_id));
    s
}

fn bench_earliest_arrival(c: &mut Criterion) {
    let grid = tessellate(Point::new(0.0, 0.0), Point::new(5000.0, 5000.0), 500.0).unwrap();
    let s = synthetic_schedule(20, 120);
    let g = build_graph(&s, &Projection::Identity, &GraphParams::default());
    let origin = grid.centroid(CellId(0));
    c.bench_function("earliest_arrival_120_trips", |b| {
        b.iter(|| {
            earliest_arrival(
                &g,
                &grid,
                black_box(origin),
                28_800,
                DEFAULT_WALK_SPEED_MPS,
                DEFAULT_MAX_WALK_S,
            )
            .unwrap()
        })
    });
}

fn bench_locate(c: &mut Criterion) {
    let grid = tessellate(Point::new(0.0, 0.0), Point::new(5000.0, 5000.0), 300.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let points: Vec<Point> = (0..1024)
        .map(|_| Point::new(rng.gen_range(0.0..5000.0), rng.gen_range(0.0..5000.0)))
        .collect();
    c.bench_function("locate_1024_points", |b| {
        b.iter(|| {
            points
                .iter()
                .map(|&p| grid.locate(black_box(p)).unwrap().0 as u64)
                .sum::<u64>()
        })
    });
}

fn bench_departures(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows: Vec<EstimateRow> = (0..24)
        .map(|k| EstimateRow {
            hub_id: "H".into(),
            direction: Direction::Access,
            slot_start: k * 3600,
            cell_id: CellId(0),
            w_hat: rng.gen_range(120.0..1800.0),
            y_hat: 300.0,
            method: Method::Kriging,
        })
        .collect();
    let field = FieldLookup::from_rows(3600, rows);
    c.bench_function("generate_departures_full_day", |b| {
        b.iter(|| generate_departures(&field, "H", Direction::Access, CellId(0), 43_200.0, 60.0))
    });
}

criterion_group!(
    benches,
    bench_krige,
    bench_earliest_arrival,
    bench_locate,
    bench_departures
);
criterion_main!(benches);
