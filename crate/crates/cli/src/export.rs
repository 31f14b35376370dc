//! GeoJSON documents and number formatting for file outputs.

use bikeflow_core::cluster::MetaLabel;
use bikeflow_core::cycles::{GeoDeltaGrid, StationDelta};
use bikeflow_core::geo::LatLon;
use bikeflow_core::routes::StationRole;
use serde_json::{json, Value};

/// Fixed six-decimal rendering, so reruns are byte-identical. Non-finite
/// values render as an empty field.
pub fn num(x: f64) -> String {
    if x.is_finite() {
        let s = format!("{x:.6}");
        if s == "-0.000000" {
            "0.000000".to_string()
        } else {
            s
        }
    } else {
        String::new()
    }
}

fn round6(x: f64) -> Value {
    if x.is_finite() {
        json!((x * 1e6).round() / 1e6)
    } else {
        Value::Null
    }
}

fn point(p: LatLon) -> Value {
    json!({ "type": "Point", "coordinates": [round6(p.lon), round6(p.lat)] })
}

fn collection(features: Vec<Value>, properties: Value) -> Value {
    json!({ "type": "FeatureCollection", "properties": properties, "features": features })
}

/// One polygon per grid cell carrying its interpolated `delta`, then one
/// point per station carrying its own.
pub fn grid_geojson(grid: &GeoDeltaGrid, stations: &[StationDelta]) -> Value {
    let (dlat, dlon) = grid.cell_size();
    let mut features = Vec::with_capacity(grid.rows * grid.cols + stations.len());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let lat0 = grid.bbox.min_lat + r as f64 * dlat;
            let lon0 = grid.bbox.min_lon + c as f64 * dlon;
            let (lat1, lon1) = (lat0 + dlat, lon0 + dlon);
            let ring = [[lon0, lat0], [lon1, lat0], [lon1, lat1], [lon0, lat1], [lon0, lat0]]
                .map(|[x, y]| json!([round6(x), round6(y)]));
            features.push(json!({
                "type": "Feature",
                "geometry": { "type": "Polygon", "coordinates": [ring.to_vec()] },
                "properties": { "kind": "cell", "row": r, "col": c, "delta": round6(grid.values[r][c]) }
            }));
        }
    }
    for s in stations {
        features.push(json!({
            "type": "Feature",
            "geometry": point(s.location),
            "properties": { "kind": "station", "station_id": s.station_id, "delta": round6(s.delta) }
        }));
    }
    collection(
        features,
        json!({ "time": grid.reference_time.to_string(), "baseline": grid.baseline_time.to_string() }),
    )
}

pub struct ZoneStation<'a> {
    pub station_id: &'a str,
    pub location: LatLon,
    pub cluster: usize,
    pub meta: Option<MetaLabel>,
}

/// Station points tagged with their cluster and meta-cluster.
pub fn zones_geojson(stations: &[ZoneStation<'_>]) -> Value {
    let features = stations
        .iter()
        .map(|s| {
            json!({
                "type": "Feature",
                "geometry": point(s.location),
                "properties": {
                    "station_id": s.station_id,
                    "cluster": s.cluster,
                    "meta_cluster": s.meta.map(|m| m.to_string()),
                }
            })
        })
        .collect();
    collection(features, json!({}))
}

pub struct RouteLine<'a> {
    pub origin_id: &'a str,
    pub dest_id: &'a str,
    pub from: LatLon,
    pub to: LatLon,
    pub probability: f64,
}

pub struct RoleStation<'a> {
    pub station_id: &'a str,
    pub location: LatLon,
    pub role: StationRole,
}

/// Route line strings, then station points colored by role.
pub fn routes_geojson(routes: &[RouteLine<'_>], stations: &[RoleStation<'_>]) -> Value {
    let mut features: Vec<Value> = routes
        .iter()
        .map(|r| {
            json!({
                "type": "Feature",
                "geometry": {
                    "type": "LineString",
                    "coordinates": [[round6(r.from.lon), round6(r.from.lat)], [round6(r.to.lon), round6(r.to.lat)]]
                },
                "properties": {
                    "kind": "route",
                    "origin_id": r.origin_id,
                    "dest_id": r.dest_id,
                    "probability": round6(r.probability)
                }
            })
        })
        .collect();
    features.extend(stations.iter().map(|s| {
        json!({
            "type": "Feature",
            "geometry": point(s.location),
            "properties": {
                "kind": "station",
                "station_id": s.station_id,
                "role": s.role.as_str(),
                "color": s.role.color()
            }
        })
    }));
    collection(features, json!({}))
}

#[cfg(test)]
mod tests {
    use super::*;
    use bikeflow_core::clock::TimeOfDay;
    use bikeflow_core::geo::BoundingBox;

    #[test]
    fn numbers_are_fixed_width() {
        assert_eq!(num(1.0), "1.000000");
        assert_eq!(num(-1e-9), "0.000000");
        assert_eq!(num(f64::NAN), "");
        assert_eq!(round6(0.1234567), json!(0.123457));
    }

    #[test]
    fn grid_has_cells_then_stations() {
        let grid = GeoDeltaGrid {
            bbox: BoundingBox { min_lat: 0.0, min_lon: 0.0, max_lat: 1.0, max_lon: 2.0 },
            rows: 1,
            cols: 2,
            values: vec![vec![1.5, -2.0]],
            reference_time: TimeOfDay::hm(9, 30),
            baseline_time: TimeOfDay::hm(5, 0),
        };
        let st = [StationDelta { station_id: "7".into(), location: LatLon::new(0.5, 0.5), delta: 1.5 }];
        let v = grid_geojson(&grid, &st);
        let f = v["features"].as_array().unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(f[1]["geometry"]["coordinates"][0][1], json!([2.0, 0.0]));
        assert_eq!(f[1]["properties"]["delta"], json!(-2.0));
        assert_eq!(f[2]["properties"]["station_id"], "7");
        assert_eq!(v["properties"]["time"], "09:30");
    }

    #[test]
    fn route_features_carry_roles() {
        let a = LatLon::new(41.0, 2.0);
        let b = LatLon::new(41.1, 2.1);
        let v = routes_geojson(
            &[RouteLine { origin_id: "1", dest_id: "2", from: a, to: b, probability: 0.25 }],
            &[RoleStation { station_id: "1", location: a, role: StationRole::Departure }],
        );
        assert_eq!(v["features"][0]["geometry"]["type"], "LineString");
        assert_eq!(v["features"][1]["properties"]["color"], "blue");
    }
}
