//! Geographic helpers and the example behaviours built on them: unit
//! conversion, Haversine distance, radius tests, bike counting and averaging.

use std::f64::consts::PI;

use crate::actor::ActorBehaviour;
use crate::behaviour::{bind, BindArg, CollectionMode, DeployStarOptions, ReactorBehaviour};
use crate::fold::FoldSpec;
use crate::ops;
use crate::value::Value;

pub const EARTH_RADIUS_KM: f64 = 6367.0;

/// Approximation of pi used by the original `DegreesToRadians`.
#[allow(clippy::approx_constant)]
pub const SHORT_PI: f64 = 3.14159;

pub const BIKES: &str = "Bikes";
pub const THERMOMETERS: &str = "Thermometers";

/// Great-circle distance in km between two `(lng, lat)` points in degrees.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lng1, lat1) = (a.0.to_radians(), a.1.to_radians());
    let (lng2, lat2) = (b.0.to_radians(), b.1.to_radians());
    let s_lat = ((lat2 - lat1) / 2.0).sin();
    let s_lng = ((lng2 - lng1) / 2.0).sin();
    let h = s_lat * s_lat + lat1.cos() * lat2.cos() * s_lng * s_lng;
    2.0 * EARTH_RADIUS_KM * h.sqrt().atan2((1.0 - h).sqrt())
}

/// Strict `<` on metres, as the radius test does.
pub fn within_radius(centre: (f64, f64), point: (f64, f64), radius_m: f64) -> bool {
    haversine_km(centre, point) * 1000.0 < radius_m
}

fn d2r(name: &str, pi: f64) -> ReactorBehaviour {
    ReactorBehaviour::define(name, &["degrees"], |b| {
        let deg = b.source("degrees");
        let p = b.constant(pi);
        let half = b.constant(180.0);
        let k = b.binary(ops::div(), p, half);
        let out = b.binary(ops::mul(), deg, k);
        b.out(out);
    })
    .expect("static behaviour")
}

/// `(* degrees (/ 3.14159 180))`, constant subgraph collapsed.
pub fn degrees_to_radians_short() -> ReactorBehaviour {
    d2r("DegreesToRadians", SHORT_PI)
}

/// Same shape with full-precision pi.
pub fn degrees_to_radians() -> ReactorBehaviour {
    d2r("DegreesToRadians", PI)
}

/// Haversine distance in km, deploying `to_radians` for every angle.
pub fn distance_between_with(to_radians: &ReactorBehaviour) -> ReactorBehaviour {
    ReactorBehaviour::define("DistanceBetween", &["point1", "point2"], |b| {
        let p1 = b.source("point1");
        let p2 = b.source("point2");
        let lat1 = b.unary(ops::get_lat(), p1);
        let lon1 = b.unary(ops::get_lng(), p1);
        let lat2 = b.unary(ops::get_lat(), p2);
        let lon2 = b.unary(ops::get_lng(), p2);
        let dlat_deg = b.binary(ops::sub(), lat2, lat1);
        let dlon_deg = b.binary(ops::sub(), lon2, lon1);
        let dlat = b.deploy(to_radians, &[dlat_deg]);
        let dlon = b.deploy(to_radians, &[dlon_deg]);
        let two = b.constant(2.0);
        let half_dlat = b.binary(ops::div(), dlat, two);
        let s1 = b.unary(ops::sin(), half_dlat);
        let t1 = b.binary(ops::expt(), s1, two);
        let rlat1 = b.deploy(to_radians, &[lat1]);
        let rlat2 = b.deploy(to_radians, &[lat2]);
        let c1 = b.unary(ops::cos(), rlat1);
        let c2 = b.unary(ops::cos(), rlat2);
        let half_dlon = b.binary(ops::div(), dlon, two);
        let s2 = b.unary(ops::sin(), half_dlon);
        let t2 = b.binary(ops::expt(), s2, two);
        let cc = b.binary(ops::mul(), c1, c2);
        let prod = b.binary(ops::mul(), cc, t2);
        let a = b.binary(ops::add(), t1, prod);
        let one = b.constant(1.0);
        let ra = b.unary(ops::sqrt(), a);
        let rest = b.binary(ops::sub(), one, a);
        let rr = b.unary(ops::sqrt(), rest);
        let at = b.binary(ops::atan2(), ra, rr);
        let c = b.binary(ops::mul(), two, at);
        let radius = b.constant(EARTH_RADIUS_KM);
        let d = b.binary(ops::mul(), radius, c);
        b.out(d);
    })
    .expect("static behaviour")
}

pub fn distance_between() -> ReactorBehaviour {
    distance_between_with(&degrees_to_radians())
}

/// Yields `bike` while its location is strictly inside the radius, NoValue otherwise.
pub fn is_bike_within_radius() -> ReactorBehaviour {
    let dist = distance_between();
    ReactorBehaviour::define("IsBikeWithinRadius", &["point", "radius-meters", "bike"], |b| {
        let point = b.source("point");
        let radius = b.source("radius-meters");
        let bike = b.source("bike");
        let loc = b.qualify(bike, "location");
        let km = b.deploy(&dist, &[point, loc]);
        let k = b.constant(1000.0);
        let m = b.binary(ops::mul(), km, k);
        let inside = b.binary(ops::lt(), m, radius);
        let out = b.binary(ops::when(), inside, bike);
        b.out(out);
    })
    .expect("static behaviour")
}

/// Emits `(id, count)` of the `Bikes` members within `radius` metres of `location`.
pub fn counting_marker(mode: CollectionMode) -> ReactorBehaviour {
    let within = is_bike_within_radius();
    ReactorBehaviour::define("CountingMarker", &["id", "location", "radius"], |b| {
        let id = b.source("id");
        let location = b.source("location");
        let radius = b.source("radius");
        let all = b.flock_contents_with(BIKES, mode);
        let bound = bind(&within, [BindArg::Node(location), BindArg::Node(radius)]).expect("two of three sources");
        let nearby = b.deploy_star_with(&bound, all, DeployStarOptions { default: None, mode });
        let n = b.size(nearby);
        b.out(id);
        b.out(n);
    })
    .expect("static behaviour")
}

/// Sums a snapshot of numbers with an inverse-aware fold.
pub fn add_all() -> ReactorBehaviour {
    ReactorBehaviour::define("AddAll", &["snapshot-of-numbers"], |b| {
        let s = b.source("snapshot-of-numbers");
        let sum = b.fold(s, FoldSpec::sum());
        b.out(sum);
    })
    .expect("static behaviour")
}

pub fn sensor_value() -> ReactorBehaviour {
    ReactorBehaviour::define("SensorValue", &["sensor"], |b| {
        let s = b.source("sensor");
        let v = b.qualify(s, "value");
        b.out(v);
    })
    .expect("static behaviour")
}

/// Mean of the latest `value` of every `Thermometers` member.
pub fn average() -> ReactorBehaviour {
    let sensor = sensor_value();
    ReactorBehaviour::define("Average", &[], |b| {
        let all = b.flock_contents(THERMOMETERS);
        let measurements = b.deploy_star(&sensor, all);
        let sum = b.fold(measurements, FoldSpec::sum());
        let n = b.size(measurements);
        let avg = b.binary(ops::div(), sum, n);
        b.out(avg);
    })
    .expect("static behaviour")
}

/// Exports `value`; `init` and `measure!` emit to it.
pub fn thermometer_behaviour() -> ActorBehaviour {
    ActorBehaviour::new("Thermometer")
        .stream("value")
        .constructor("init", 1, |cx, args| cx.emit("value", args[0].clone()))
        .method("measure!", 1, |cx, args| cx.emit("value", args[0].clone()))
}

pub fn lnglat(v: &Value) -> Option<(f64, f64)> {
    match v {
        Value::LngLat { lng, lat } => Some((*lng, *lat)),
        _ => None,
    }
}
