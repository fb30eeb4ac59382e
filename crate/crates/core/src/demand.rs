//! Requests, fares, synthetic hotspot demand and epoch batching.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hexgrid::{HexGrid, RegionId};
use crate::network::{NodeId, StreetNetwork};

/// Default decision epoch length in seconds.
pub const DEFAULT_EPOCH_SECONDS: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub origin: NodeId,
    pub destination: NodeId,
    /// Seconds since simulation start.
    pub arrival_s: f64,
    pub price: f64,
}

impl Request {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| {
            Err(Error::InvalidRequest {
                id: self.id,
                msg: msg.into(),
            })
        };
        if self.origin == self.destination {
            return bad("origin equals destination");
        }
        if !(self.price > 0.0 && self.price.is_finite()) {
            return bad("price must be positive");
        }
        if !(self.arrival_s >= 0.0 && self.arrival_s.is_finite()) {
            return bad("arrival time must be non-negative");
        }
        Ok(())
    }
}

/// Requests arriving in `[epoch * delta, (epoch + 1) * delta)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub epoch: usize,
    pub requests: Vec<Request>,
}

/// Fare as `base + per_km * km + per_min * minutes` along the shortest route.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Pricing {
    pub base: f64,
    pub per_km: f64,
    pub per_min: f64,
}

impl Default for Pricing {
    fn default() -> Self {
        Pricing {
            base: 2.0,
            per_km: 1.5,
            per_min: 0.3,
        }
    }
}

pub fn price_request(net: &StreetNetwork, origin: NodeId, dest: NodeId, pricing: &Pricing) -> Result<f64> {
    let route = net.shortest_route(origin, dest)?;
    let price =
        pricing.base + pricing.per_km * route.length_m / 1000.0 + pricing.per_min * route.total_seconds() / 60.0;
    if price > 0.0 {
        Ok(price)
    } else {
        Err(Error::Config(format!(
            "pricing {pricing:?} yields non-positive fare {price}"
        )))
    }
}

#[derive(Debug, Deserialize)]
struct NodeRecord {
    id: u64,
    origin: u64,
    dest: u64,
    arrival_s: f64,
    price: f64,
}

#[derive(Debug, Deserialize)]
struct CoordRecord {
    id: u64,
    olat: f64,
    olon: f64,
    dlat: f64,
    dlon: f64,
    arrival_s: f64,
}

/// Reads a request CSV in either node-id form
/// (`id,origin,dest,arrival_s,price`) or coordinate form
/// (`id,olat,olon,dlat,dlon,arrival_s`). Coordinates snap to the nearest
/// node and are priced with `pricing`. Output is sorted by arrival then id.
pub fn load_requests(path: impl AsRef<Path>, net: &StreetNetwork, pricing: &Pricing) -> Result<Vec<Request>> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
    parse_requests(&text, net, pricing)
}

pub fn parse_requests(text: &str, net: &StreetNetwork, pricing: &Pricing) -> Result<Vec<Request>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let coordinate_form = headers.iter().any(|h| h == "olat");
    let mut out = Vec::new();
    if coordinate_form {
        for rec in rdr.deserialize::<CoordRecord>() {
            let rec = rec?;
            let origin = net.nearest_node(rec.olat, rec.olon);
            let destination = net.nearest_node(rec.dlat, rec.dlon);
            if origin == destination {
                return Err(Error::InvalidRequest {
                    id: rec.id,
                    msg: "origin and destination snap to the same node".into(),
                });
            }
            let price = price_request(net, origin, destination, pricing)
                .map_err(|e| e.context(format!("pricing request {}", rec.id)))?;
            let r = Request {
                id: rec.id,
                origin,
                destination,
                arrival_s: rec.arrival_s,
                price,
            };
            r.validate()?;
            out.push(r);
        }
    } else {
        for rec in rdr.deserialize::<NodeRecord>() {
            let rec = rec?;
            let r = Request {
                id: rec.id,
                origin: net.node(rec.origin)?,
                destination: net.node(rec.dest)?,
                arrival_s: rec.arrival_s,
                price: rec.price,
            };
            r.validate()?;
            out.push(r);
        }
    }
    sort_requests(&mut out);
    Ok(out)
}

fn sort_requests(reqs: &mut [Request]) {
    reqs.sort_by(|a, b| a.arrival_s.total_cmp(&b.arrival_s).then(a.id.cmp(&b.id)));
}

/// Writes requests in node-id CSV form.
pub fn save_requests(path: impl AsRef<Path>, requests: &[Request], net: &StreetNetwork) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "origin", "dest", "arrival_s", "price"])?;
    for r in requests {
        w.write_record([
            r.id.to_string(),
            net.external_id(r.origin).to_string(),
            net.external_id(r.destination).to_string(),
            r.arrival_s.to_string(),
            r.price.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Poisson demand: `rates[region]` expected requests per epoch originating in
/// each region, origins uniform over the region's nodes, destinations uniform
/// over all other nodes, arrivals uniform within the epoch.
pub fn synth_hotspot_demand(
    net: &StreetNetwork,
    grid: &HexGrid,
    epochs: usize,
    rates: &[f64],
    delta: f64,
    pricing: &Pricing,
    seed: u64,
) -> Result<Vec<Request>> {
    if rates.len() != grid.region_count() {
        return Err(Error::DimensionMismatch(rates.len(), grid.region_count()));
    }
    if let Some(r) = rates.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
        return Err(Error::Config(format!("demand rate must be non-negative, got {r}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = net.node_count();
    let mut out = Vec::new();
    let mut next_id = 0u64;
    for epoch in 0..epochs {
        for region in grid.regions() {
            let rate = rates[region.0];
            let nodes = grid.nodes_in(region);
            if rate == 0.0 || nodes.is_empty() {
                continue;
            }
            let count = Poisson::new(rate)
                .map_err(|e| Error::Config(format!("poisson rate {rate}: {e}")))?
                .sample(&mut rng) as usize;
            for _ in 0..count {
                let origin = nodes[rng.random_range(0..nodes.len())];
                let mut destination = origin;
                for _ in 0..64 {
                    let d = NodeId(rng.random_range(0..n));
                    if d != origin && net.time(origin, d).is_finite() {
                        destination = d;
                        break;
                    }
                }
                let arrival_s = (epoch as f64 + rng.random::<f64>()) * delta;
                if destination == origin {
                    continue;
                }
                let price = price_request(net, origin, destination, pricing)?;
                out.push(Request {
                    id: next_id,
                    origin,
                    destination,
                    arrival_s,
                    price,
                });
                next_id += 1;
            }
        }
    }
    sort_requests(&mut out);
    Ok(out)
}

/// Rate map with `hot_rate` in each hotspot region and `background` elsewhere.
pub fn hotspot_rates(grid: &HexGrid, hotspots: &[RegionId], hot_rate: f64, background: f64) -> Vec<f64> {
    let mut rates = vec![background; grid.region_count()];
    for h in hotspots {
        if let Some(r) = rates.get_mut(h.0) {
            *r = hot_rate;
        }
    }
    rates
}

/// Partitions requests by arrival epoch. The result has
/// `max(min_epochs, last arrival epoch + 1)` batches, empty ones included.
pub fn batch_requests(requests: &[Request], delta: f64, min_epochs: usize) -> Result<Vec<Batch>> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!("epoch length must be positive, got {delta}")));
    }
    let epoch_of = |r: &Request| (r.arrival_s / delta).floor() as usize;
    let count = requests
        .iter()
        .map(|r| epoch_of(r) + 1)
        .max()
        .unwrap_or(0)
        .max(min_epochs);
    let mut batches: Vec<Batch> = (0..count)
        .map(|epoch| Batch {
            epoch,
            requests: Vec::new(),
        })
        .collect();
    for r in requests {
        batches[epoch_of(r)].requests.push(r.clone());
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hexgrid::build_synthetic_grid;
    use crate::network::grid_network;

    fn req(id: u64, t: f64) -> Request {
        Request {
            id,
            origin: NodeId(0),
            destination: NodeId(1),
            arrival_s: t,
            price: 1.0,
        }
    }

    #[test]
    fn window_boundary() {
        let b = batch_requests(&[req(0, 0.0), req(1, 59.0), req(2, 60.0)], 60.0, 0).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].requests.len(), 2);
        assert_eq!(b[1].requests.len(), 1);
        assert_eq!(b[1].epoch, 1);
    }

    #[test]
    fn empty_input_yields_empty_batches() {
        let b = batch_requests(&[], 60.0, 5).unwrap();
        assert_eq!(b.len(), 5);
        assert!(b.iter().all(|b| b.requests.is_empty()));
    }

    #[test]
    fn zero_delta_rejected() {
        assert!(batch_requests(&[], 0.0, 1).is_err());
    }

    #[test]
    fn pricing_examples() {
        let net = grid_network(3, 3, 1.0, 60.0).unwrap();
        let flat = Pricing {
            base: 2.0,
            per_km: 0.0,
            per_min: 0.0,
        };
        assert_eq!(price_request(&net, NodeId(0), NodeId(8), &flat).unwrap(), 2.0);
        let km = Pricing {
            base: 0.0,
            per_km: 1.0,
            per_min: 0.0,
        };
        assert!((price_request(&net, NodeId(0), NodeId(1), &km).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_single_request_files() {
        let net = grid_network(3, 3, 1.0, 60.0).unwrap();
        let p = Pricing::default();
        assert!(parse_requests("", &net, &p).unwrap().is_empty());
        let one = parse_requests("id,origin,dest,arrival_s,price\n1,3,7,0,10\n", &net, &p).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].origin, NodeId(3));
        assert_eq!(one[0].destination, NodeId(7));
        assert_eq!(one[0].price, 10.0);
    }

    #[test]
    fn bad_records() {
        let net = grid_network(3, 3, 1.0, 60.0).unwrap();
        let p = Pricing::default();
        assert!(matches!(
            parse_requests("id,origin,dest,arrival_s,price\n1,3,70,0,10\n", &net, &p),
            Err(Error::UnknownNode(70))
        ));
        assert!(matches!(
            parse_requests("id,origin,dest,arrival_s,price\n1,3,7,0,0\n", &net, &p),
            Err(Error::InvalidRequest { id: 1, .. })
        ));
    }

    #[test]
    fn coordinate_tie_snaps_to_smaller_node() {
        let net = grid_network(3, 3, 1.0, 60.0).unwrap();
        let p = Pricing::default();
        // origin halfway between node 0 (0,0) and node 1 (0,1)
        let text = "id,olat,olon,dlat,dlon,arrival_s\n5,0,0.5,2,2,12\n";
        let r = parse_requests(text, &net, &p).unwrap();
        assert_eq!(r[0].origin, NodeId(0));
        assert_eq!(r[0].destination, NodeId(8));
        let expected = price_request(&net, NodeId(0), NodeId(8), &p).unwrap();
        assert_eq!(r[0].price, expected);
    }

    #[test]
    fn zero_rates_give_no_requests() {
        let net = grid_network(5, 5, 0.2, 60.0).unwrap();
        let grid = build_synthetic_grid(3, 3, &net).unwrap();
        let rates = vec![0.0; grid.region_count()];
        let r = synth_hotspot_demand(&net, &grid, 10, &rates, 60.0, &Pricing::default(), 1).unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn synthetic_demand_is_seeded() {
        let net = grid_network(5, 5, 0.2, 60.0).unwrap();
        let grid = build_synthetic_grid(3, 3, &net).unwrap();
        let rates = vec![0.7; grid.region_count()];
        let a = synth_hotspot_demand(&net, &grid, 20, &rates, 60.0, &Pricing::default(), 9).unwrap();
        let b = synth_hotspot_demand(&net, &grid, 20, &rates, 60.0, &Pricing::default(), 9).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.iter().all(|r| r.validate().is_ok() && r.arrival_s < 20.0 * 60.0));
    }
}
