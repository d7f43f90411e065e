//! The day loop shared by every run mode.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Geometric, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::metrics::{DayMetrics, DayTiming, MetricsReport, Totals, TimingReport};
use super::world::{make_stay, stream, uniform_in_disk, Health, World};
use super::{AttackKind, AttackScenario, SimConfig, SimError};
use crate::devicelog::{rssi_from_distance, ExchangeRecord};
use crate::edgeserver::relay::{record_tag, Direction, RecordTag, RelayEnvelope, SessionId};
use crate::edgeserver::store::ObfuscatedStore;
use crate::edgeserver::{LocalRelay, RelayPort};
use crate::filter::{decode_upload, dedupe_policy, encode_upload, filter_and_recombine, UploadRecord};
use crate::finematch::session::{patient_accept, user_hello, PatientSession, UserAwaiting, UserHello};
use crate::finematch::signature::scheme_by_name;
use crate::finematch::{
    coarse_log_line, coarse_match, fine_log_line, gen_params, make_diameter_pair, CoarseClass,
    DiameterPair, FineGrainParams, FixedPoint, Heading, KeyPair, SignatureScheme, Verdict,
};
use crate::geocell::PlanarPoint;
use crate::keysched::{
    interval_of, interval_start, CoarseTime, DailyTracingKey, Rpi, INTERVAL_SECONDS,
    SECONDS_PER_DAY,
};
use crate::riskscore::{derive_factors, risk_score, should_warn, ExposureSample};

/// Oldest announcement a user accepts, in seconds.
pub const ANNOUNCEMENT_MAX_AGE: u64 = 3600;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: Option<AttackKind>,
    pub same_cell: bool,
    pub tapped_agents: usize,
    pub injected_beacons: usize,
    pub victim_coarse_hits: usize,
    pub wormhole_suspects: usize,
    pub replay_suspects: usize,
    pub fine_rejections: usize,
    pub false_contacts: usize,
    pub log: Vec<String>,
}

impl AttackReport {
    /// Everything flagged, at either stage.
    pub fn suspects(&self) -> usize {
        self.wormhole_suspects + self.replay_suspects + self.fine_rejections
    }
}

pub struct SimOutput {
    pub report: MetricsReport,
    pub timing: TimingReport,
    pub attack: Option<AttackReport>,
}

struct PatientDevice {
    id: u32,
    keys: KeyPair,
    params: usize,
    records: Vec<(RecordTag, DiameterPair)>,
}

struct Pending {
    user: u32,
    sid: SessionId,
    record: UploadRecord,
    position: FixedPoint,
    beacons: u32,
    rssi: i32,
    hello: Option<UserHello>,
    awaiting: Option<UserAwaiting>,
    patient: Option<u32>,
}

struct AttackPlan {
    scenario: AttackScenario,
    emit: PlanarPoint,
    same_cell: bool,
}

pub(crate) struct Engine<'a> {
    cfg: &'a SimConfig,
    world: World,
    store: ObfuscatedStore<ChaCha20Rng>,
    relay: LocalRelay<ChaCha20Rng>,
    scheme: Box<dyn SignatureScheme>,
    pool: Vec<FineGrainParams>,
    truth: Vec<Vec<(u32, u64)>>,
    baseline_live: BTreeMap<u32, (usize, usize)>,
    plan: Option<AttackPlan>,
    tapped: BTreeSet<u32>,
    days: Vec<DayMetrics>,
    timing: Vec<DayTiming>,
    attack: AttackReport,
}

fn plan_attack(cfg: &SimConfig, world: &World) -> Result<Option<AttackPlan>, SimError> {
    let Some(s) = cfg.attack.clone() else {
        return Ok(None);
    };
    let bad = |m: &str| Err(SimError::ScenarioInvalid(m.into()));
    if s.tap_place >= world.places.len() {
        return bad("tap_place is not a place");
    }
    if s.day >= cfg.days {
        return bad("attack day after the end of the run");
    }
    if s.victims == 0 {
        return bad("no victims");
    }
    if s.slots.is_empty() || s.slots.iter().any(|&x| x >= cfg.slots) {
        return bad("attack slots outside the visit slots");
    }
    let tap = &world.places[s.tap_place];
    let (emit, same_cell) = match (s.kind, s.emit_place) {
        (AttackKind::Replay, _) => (tap.center, true),
        (AttackKind::Wormhole, Some(e)) => {
            if e >= world.places.len() || e == s.tap_place {
                return bad("emit_place must be another place");
            }
            (world.places[e].center, false)
        }
        (AttackKind::Wormhole, None) => {
            let p = PlanarPoint::new(tap.center.x + s.emit_offset_m, tap.center.y);
            let reach = s.emit_offset_m.abs() - s.victim_spread_m - cfg.place_radius_m;
            if world.grid.cell_of_planar(&p, cfg.resolution) != tap.cell {
                return bad("emit offset leaves the tap cell");
            }
            if reach <= cfg.contact_radius_m as f64 {
                return bad("emit offset puts victims within contact range");
            }
            (p, true)
        }
    };
    Ok(Some(AttackPlan {
        scenario: s,
        emit,
        same_cell,
    }))
}

impl<'a> Engine<'a> {
    pub(crate) fn new(cfg: &'a SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let victims = cfg.attack.as_ref().map_or(0, |a| a.victims);
        let world = World::new(cfg, victims)?;
        let plan = plan_attack(cfg, &world)?;
        let scheme = scheme_by_name(&cfg.signature)
            .ok_or_else(|| SimError::ConfigInvalid(cfg.signature.clone()))?;
        let pool = (0..cfg.param_pool as u64)
            .map(|i| gen_params(cfg.params, &mut stream(cfg.seed, "params", i, 0)))
            .collect::<Result<Vec<_>, _>>()?;
        let n = world.agents.len();
        let attack = AttackReport {
            kind: plan.as_ref().map(|p| p.scenario.kind),
            same_cell: plan.as_ref().is_some_and(|p| p.same_cell),
            ..AttackReport::default()
        };
        Ok(Engine {
            cfg,
            world,
            store: ObfuscatedStore::with_retention(
                stream(cfg.seed, "server", 0, 0),
                cfg.retention_days,
            ),
            relay: LocalRelay::new(stream(cfg.seed, "relay", 0, 0)),
            scheme,
            pool,
            truth: vec![Vec::new(); n],
            baseline_live: BTreeMap::new(),
            plan,
            tapped: BTreeSet::new(),
            days: Vec::new(),
            timing: Vec::new(),
            attack,
        })
    }

    pub(crate) fn run(mut self) -> Result<SimOutput, SimError> {
        for k in 0..self.cfg.days {
            self.day(k)?;
        }
        let totals = Totals::from_days(&self.days);
        let attack = self.plan.is_some().then(|| {
            let mut a = self.attack;
            a.false_contacts = totals.false_positives;
            a
        });
        Ok(SimOutput {
            report: MetricsReport {
                config: self.cfg.clone(),
                days: self.days,
                totals,
            },
            timing: TimingReport { days: self.timing },
            attack,
        })
    }

    fn day(&mut self, k: u32) -> Result<(), SimError> {
        let cfg = self.cfg;
        let day = cfg.start_day + k;
        let t0 = interval_start(day, 0);
        let t_end = t0 + SECONDS_PER_DAY;
        let cutoff = t_end.saturating_sub(cfg.retention_days as u64 * SECONDS_PER_DAY);
        let mut m = DayMetrics {
            day: k,
            day_index: day,
            ..DayMetrics::default()
        };
        let mut tm = DayTiming {
            day: k,
            ..DayTiming::default()
        };

        self.broadcast(day, t0);
        let occupancy = self.walk(t0)?;
        let captured = self.meet(day, t0, &occupancy)?;
        if self.plan.as_ref().is_some_and(|p| p.scenario.day == k) {
            self.inject(t0, t_end, &captured)?;
        }

        for a in &mut self.world.agents {
            a.log.prune_before(cutoff);
            a.stays.retain(|s| s.end > cutoff);
        }
        for t in &mut self.truth {
            t.retain(|&(_, ts)| ts >= cutoff);
        }

        let patients = self.diagnose(k, day);
        m.new_patients = patients.len();
        let (devices, baseline_rpis, baseline_payload) =
            self.upload(day, &patients, &mut m, &mut tm)?;

        let snap = self.store.publish(t_end);
        m.server_epoch = snap.epoch;
        m.server_records = snap.records.len();
        m.server_bytes = snap
            .records
            .iter()
            .map(|r| r.upload_record().to_line().len() + 1)
            .sum();
        let oldest = (day + 1).saturating_sub(cfg.retention_days);
        self.baseline_live = self.baseline_live.split_off(&oldest);
        m.baseline_server_records = self.baseline_live.values().map(|v| v.0).sum();
        m.baseline_server_bytes = self.baseline_live.values().map(|v| v.1).sum();

        let verifying: Vec<u32> = self
            .world
            .agents
            .iter()
            .filter(|a| a.health != Health::Sick)
            .map(|a| a.id)
            .collect();
        let truth: BTreeSet<(u32, u32)> = patients
            .iter()
            .flat_map(|&p| self.truth[p as usize].iter().map(move |&(o, _)| (o, p)))
            .filter(|&(o, _)| self.world.agents[o as usize].health != Health::Sick)
            .collect();

        let mut user_us: HashMap<u32, f64> = HashMap::new();
        let (detected, exposures) =
            self.verify(t_end, &verifying, &devices, &snap, &mut m, &mut user_us)?;

        // Upload-everything comparator: identifier equality alone.
        let mut baseline_detected = BTreeSet::new();
        for &u in &verifying {
            for e in self.world.agents[u as usize].log.exchanges() {
                if let Some(&p) = baseline_rpis.get(&e.rpi) {
                    baseline_detected.insert((u, p));
                }
            }
        }
        let step = (verifying.len() / cfg.timing_sample.max(1)).max(1);
        let mut sampled = 0usize;
        let mut baseline_us = 0.0;
        if !baseline_payload.is_empty() {
            for &u in verifying.iter().step_by(step).take(cfg.timing_sample) {
                let start = Instant::now();
                let recs = decode_upload(&baseline_payload)?;
                let set: HashSet<Rpi> = recs.iter().map(|r| r.rpi).collect();
                let hits = self.world.agents[u as usize]
                    .log
                    .exchanges()
                    .iter()
                    .filter(|e| set.contains(&e.rpi))
                    .count();
                std::hint::black_box(hits);
                baseline_us += start.elapsed().as_secs_f64() * 1e6;
                sampled += 1;
            }
        }

        let mut warned = BTreeSet::new();
        for ((u, _), (samples, last_day)) in &exposures {
            let f = derive_factors(samples, day - last_day, cfg.transmission_level, &cfg.risk)?;
            if should_warn(risk_score(&f)?, &cfg.risk) {
                warned.insert(*u);
            }
        }
        m.warnings = warned.len();
        for &(u, _) in &detected {
            let a = &mut self.world.agents[u as usize];
            if a.health == Health::Healthy {
                a.health = Health::Suspected;
            }
        }

        m.true_contacts = truth.len();
        m.detected = detected.len();
        m.true_positives = detected.intersection(&truth).count();
        m.false_positives = m.detected - m.true_positives;
        m.missed = m.true_contacts - m.true_positives;
        m.baseline_detected = baseline_detected.len();
        m.baseline_true_positives = baseline_detected.intersection(&truth).count();
        m.baseline_false_positives = m.baseline_detected - m.baseline_true_positives;
        for a in &self.world.agents {
            match a.health {
                Health::Healthy => m.healthy += 1,
                Health::Suspected => m.suspected += 1,
                Health::Sick => m.sick += 1,
            }
        }
        let log_bytes: usize = self
            .world
            .agents
            .iter()
            .map(|a| {
                57 * a.log.broadcasts().len()
                    + a.log
                        .exchanges()
                        .iter()
                        .map(|e| 123 + e.rssi.to_string().len())
                        .sum::<usize>()
            })
            .sum();
        m.device_log_bytes_mean = log_bytes as f64 / self.world.agents.len() as f64;

        tm.users = verifying.len();
        tm.verify_us_mean = user_us.values().sum::<f64>() / verifying.len().max(1) as f64;
        tm.baseline_sampled = sampled;
        tm.baseline_verify_us_mean = baseline_us / sampled.max(1) as f64;
        self.relay.relay.expire(t_end);
        self.days.push(m);
        self.timing.push(tm);
        Ok(())
    }

    fn broadcast(&mut self, day: u32, t0: u64) {
        for a in &mut self.world.agents {
            a.keys.advance_to(day);
            a.today = a
                .keys
                .key_for_day(day, &mut a.crypto)
                .map(|k| k.day_rpis())
                .unwrap_or_default();
            for (i, rpi) in a.today.iter().enumerate() {
                a.log.record_broadcast(t0 + i as u64 * INTERVAL_SECONDS, *rpi);
            }
        }
    }

    fn slot_start(&self, t0: u64, slot: usize) -> u64 {
        t0 + (self.cfg.day_start_hour as u64 + slot as u64) * 3600
    }

    /// Picks each free agent's visits and returns who is where, indexed by
    /// `slot * places + place`.
    fn walk(&mut self, t0: u64) -> Result<Vec<Vec<u32>>, SimError> {
        let cfg = self.cfg;
        let slots = cfg.slots as usize;
        let np = self.world.places.len();
        let mut occupancy = vec![Vec::new(); slots * np];
        let starts: Vec<u64> = (0..slots).map(|s| self.slot_start(t0, s)).collect();
        let World {
            grid,
            resolution,
            coord_bits,
            places,
            agents,
        } = &mut self.world;
        for a in agents.iter_mut() {
            if a.victim || a.health == Health::Sick {
                continue;
            }
            let mut chosen = index::sample(&mut a.walk, slots, cfg.visits_per_day as usize).into_vec();
            chosen.sort_unstable();
            let mut spots: Vec<(usize, PlanarPoint)> = Vec::new();
            for s in chosen {
                let place = a.walk.gen_range(0..np);
                let pos = match spots.iter().find(|(p, _)| *p == place) {
                    Some(&(_, q)) => q,
                    None => {
                        let q = uniform_in_disk(&places[place].center, cfg.place_radius_m, &mut a.walk);
                        spots.push((place, q));
                        q
                    }
                };
                a.stays.push(make_stay(grid, *resolution, *coord_bits, starts[s], starts[s] + 3600, pos)?);
                occupancy[s * np + place].push(a.id);
            }
        }
        Ok(occupancy)
    }

    /// Draws encounters at every busy place and logs the beacons both sides
    /// hear. Returns what an attacker at the tap place captured.
    fn meet(
        &mut self,
        day: u32,
        t0: u64,
        occupancy: &[Vec<u32>],
    ) -> Result<Vec<(u64, Rpi, u32)>, SimError> {
        let cfg = self.cfg;
        let np = self.world.places.len();
        let poisson = (cfg.partners_mean > 0.0)
            .then(|| Poisson::new(cfg.partners_mean))
            .transpose()
            .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        let geo = Geometric::new(1.0 / cfg.beacons_mean)
            .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        let noise = Normal::new(0.0, cfg.rssi_noise_db.max(0.0))
            .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        let every = cfg.beacon_interval_s;
        let max_beacons = (3600 / every).max(1);
        let r2 = cfg.contact_radius_m * cfg.contact_radius_m;
        let tap = self
            .plan
            .as_ref()
            .filter(|p| p.scenario.day + cfg.start_day == day)
            .map(|p| (p.scenario.tap_place, p.scenario.slots.clone()));
        let mut captured = Vec::new();

        for (idx, present) in occupancy.iter().enumerate() {
            let n = present.len();
            if n < 2 {
                continue;
            }
            let (slot, place) = (idx / np, idx % np);
            let mut rng = stream(cfg.seed, "meet", day as u64, idx as u64);
            let mut pairs = BTreeSet::new();
            for (ia, &a) in present.iter().enumerate() {
                let k = poisson.map_or(0, |p| p.sample(&mut rng) as usize).min(n - 1);
                for j in index::sample(&mut rng, n - 1, k).iter() {
                    let b = present[if j >= ia { j + 1 } else { j }];
                    pairs.insert((a.min(b), a.max(b)));
                }
            }
            let tapping = tap
                .as_ref()
                .is_some_and(|(p, s)| *p == place && s.contains(&(slot as u32)));
            let slot_start = self.slot_start(t0, slot);
            for (a, b) in pairs {
                let beacons = (1 + geo.sample(&mut rng)).min(max_beacons);
                let span = (beacons - 1) * every;
                let first = slot_start + rng.gen_range(0..3600 - span);
                let (ai, bi) = (a as usize, b as usize);
                let sa = *self.world.agents[ai].stay_at(first).expect("visitor has a stay");
                let sb = *self.world.agents[bi].stay_at(first).expect("visitor has a stay");
                if sa.fixed.dist_sq(&sb.fixed) < r2 {
                    self.truth[ai].push((b, first));
                    self.truth[bi].push((a, first));
                }
                let dist = sa.pos.distance(&sb.pos);
                for j in 0..beacons {
                    let t = first + j * every;
                    let iv = interval_of(t).1 as usize - 1;
                    let (ra, rb) = (self.world.agents[ai].today[iv], self.world.agents[bi].today[iv]);
                    let na = noise.sample(&mut rng);
                    let nb = noise.sample(&mut rng);
                    self.world.agents[ai]
                        .log
                        .record_exchange(t, rb, sa.digest, rssi_from_distance(dist, na));
                    self.world.agents[bi]
                        .log
                        .record_exchange(t, ra, sb.digest, rssi_from_distance(dist, nb));
                    if tapping {
                        captured.push((t, ra, a));
                        captured.push((t, rb, b));
                    }
                }
            }
        }
        Ok(captured)
    }

    fn inject(&mut self, t0: u64, t_end: u64, captured: &[(u64, Rpi, u32)]) -> Result<(), SimError> {
        let plan = self.plan.as_ref().expect("attack planned");
        let s = &plan.scenario;
        let delay = match s.kind {
            AttackKind::Wormhole => 0,
            AttackKind::Replay => s.replay_delay_intervals as u64 * INTERVAL_SECONDS,
        };
        let first_victim = self.cfg.users;
        let World {
            grid,
            resolution,
            coord_bits,
            agents,
            ..
        } = &mut self.world;
        for v in &mut agents[first_victim..] {
            let pos = uniform_in_disk(&plan.emit, s.victim_spread_m, &mut v.walk);
            v.stays.push(make_stay(grid, *resolution, *coord_bits, t0, t_end, pos)?);
        }
        for &(t, rpi, src) in captured {
            let t = t + delay;
            if t >= t_end {
                continue;
            }
            for v in &mut agents[first_victim..] {
                let st = *v.stay_at(t).expect("victim is in place all day");
                let rssi = rssi_from_distance(st.pos.distance(&plan.emit) + 1.0, 0.0);
                v.log.record_exchange(t, rpi, st.digest, rssi);
                self.attack.injected_beacons += 1;
            }
            self.tapped.insert(src);
        }
        self.attack.tapped_agents = self.tapped.len();
        Ok(())
    }

    fn diagnose(&mut self, k: u32, day: u32) -> Vec<u32> {
        let cfg = self.cfg;
        let mut newly = BTreeSet::new();
        for a in &self.world.agents {
            if a.health == Health::Suspected
                && stream(cfg.seed, "infect", day as u64, a.id as u64).gen_bool(cfg.infection_rate)
            {
                newly.insert(a.id);
            }
        }
        if k == 0 {
            let n = (cfg.users as f64 * cfg.initial_patient_fraction).round() as usize;
            let mut rng = stream(cfg.seed, "initial", 0, 0);
            newly.extend(index::sample(&mut rng, cfg.users, n.min(cfg.users)).iter().map(|i| i as u32));
        }
        newly.extend(cfg.forced_patients.iter().filter(|f| f.0 == k).map(|f| f.1));
        if self.plan.as_ref().is_some_and(|p| p.scenario.day == k && p.scenario.targeted) {
            newly.extend(self.tapped.iter().copied());
        }
        newly
            .into_iter()
            .filter(|&id| {
                let a = &mut self.world.agents[id as usize];
                let fresh = a.health != Health::Sick;
                a.health = Health::Sick;
                fresh
            })
            .collect()
    }

    #[allow(clippy::type_complexity)]
    fn upload(
        &mut self,
        day: u32,
        patients: &[u32],
        m: &mut DayMetrics,
        tm: &mut DayTiming,
    ) -> Result<(Vec<PatientDevice>, HashMap<Rpi, u32>, String), SimError> {
        let cfg = self.cfg;
        let mut devices = Vec::new();
        let mut baseline_rpis = HashMap::new();
        let mut baseline_payload = String::new();
        let mut prep_us = 0.0;
        for &p in patients {
            let a = &mut self.world.agents[p as usize];
            let start = Instant::now();
            let recs = filter_and_recombine(a.log.exchanges(), a.log.broadcasts())?;
            let ups = dedupe_policy(&recs);
            let payload = encode_upload(&ups);
            prep_us += start.elapsed().as_secs_f64() * 1e6;
            m.upload_records += ups.len();
            m.upload_bytes += payload.len();
            if !ups.is_empty() {
                self.store.accept_upload(&ups)?;
            }

            let mut seed = [0u8; 32];
            a.crypto.fill_bytes(&mut seed);
            let mut dev = PatientDevice {
                id: p,
                keys: self.scheme.keypair_from_seed(&seed),
                params: p as usize % self.pool.len(),
                records: Vec::with_capacity(ups.len()),
            };
            for r in &ups {
                let Some(st) = a.stay_at(r.coarse_time.start()) else {
                    continue;
                };
                let pair = make_diameter_pair(
                    st.fixed,
                    cfg.contact_radius_m,
                    Heading::EAST,
                    cfg.params.coord_bits,
                )?;
                dev.records
                    .push((record_tag(&r.rpi, &r.cell_digest, r.coarse_time), pair));
            }
            devices.push(dev);

            // Upload-everything comparator: one record per interval of the window.
            let mut all = Vec::with_capacity(cfg.retention_days as usize * 96);
            for d in (day + 1).saturating_sub(cfg.retention_days)..=day {
                let rpis = match a.keys.get(d) {
                    Some(key) => key.day_rpis(),
                    None => DailyTracingKey::generate(d, &mut stream(cfg.seed, "prehistory", p as u64, d as u64))
                        .day_rpis(),
                };
                let before = all.len();
                for (i, rpi) in rpis.into_iter().enumerate() {
                    let ts = interval_start(d, i as u32 + 1);
                    all.push(UploadRecord {
                        rpi,
                        cell_digest: a.stay_at(ts).map_or(a.home_digest, |s| s.digest),
                        coarse_time: CoarseTime::of(ts),
                        multiplicity: 1,
                    });
                    baseline_rpis.insert(rpi, p);
                }
                let bytes = encode_upload(&all[before..]).len();
                let e = self.baseline_live.entry(d).or_default();
                e.0 += all.len() - before;
                e.1 += bytes;
            }
            let text = encode_upload(&all);
            m.baseline_upload_records += all.len();
            m.baseline_upload_bytes += text.len();
            baseline_payload.push_str(&text);
        }
        tm.upload_prep_us_mean = prep_us / patients.len().max(1) as f64;
        Ok((devices, baseline_rpis, baseline_payload))
    }

    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    fn verify(
        &mut self,
        now: u64,
        verifying: &[u32],
        devices: &[PatientDevice],
        snap: &crate::edgeserver::store::Snapshot,
        m: &mut DayMetrics,
        user_us: &mut HashMap<u32, f64>,
    ) -> Result<
        (
            BTreeSet<(u32, u32)>,
            BTreeMap<(u32, u32), (Vec<ExposureSample>, u32)>,
        ),
        SimError,
    > {
        let cfg = self.cfg;
        let log_victims = self.plan.is_some();
        let mut payloads: HashMap<u64, String> = HashMap::new();
        let mut pending: Vec<Pending> = Vec::new();

        for &u in verifying {
            let a = &mut self.world.agents[u as usize];
            let since = a.since_epoch;
            let payload = match payloads.get(&since) {
                Some(p) => p,
                None => {
                    let recs: Vec<UploadRecord> =
                        snap.since(since)?.iter().map(|r| r.upload_record()).collect();
                    payloads.entry(since).or_insert(encode_upload(&recs))
                }
            };
            let start = Instant::now();
            let downloaded = decode_upload(payload)?;
            a.since_epoch = snap.epoch;
            let outcomes = coarse_match(a.log.exchanges(), &downloaded);
            let mut hits: BTreeMap<UploadRecord, Vec<ExchangeRecord>> = BTreeMap::new();
            let mut flagged = BTreeSet::new();
            for o in &outcomes {
                if o.class == CoarseClass::Hit {
                    hits.entry(o.record).or_default().push(o.exchange);
                }
                // One verdict per record and receiving cell.
                if !flagged.insert((o.record, o.exchange.cell_digest, o.class as u8)) {
                    continue;
                }
                match o.class {
                    CoarseClass::Hit => {
                        m.coarse_hits += 1;
                        if a.victim {
                            self.attack.victim_coarse_hits += 1;
                        }
                    }
                    CoarseClass::WormholeSuspect => m.wormhole_suspects += 1,
                    CoarseClass::ReplaySuspect => m.replay_suspects += 1,
                }
                if log_victims && a.victim {
                    self.attack.log.push(coarse_log_line(o));
                }
            }
            for (record, exs) in hits {
                let Some(&st) = a.stay_at(exs[0].timestamp) else {
                    m.session_errors += 1;
                    continue;
                };
                let tag = record_tag(&record.rpi, &record.cell_digest, record.coarse_time);
                let sid = self.relay.open_session(tag, now)?;
                let (hello, msg) = user_hello(sid, &mut a.crypto);
                self.relay.send(envelope(sid, Direction::UserToPatient, msg, now))?;
                let rssi = exs.iter().map(|e| e.rssi as f64).sum::<f64>() / exs.len() as f64;
                pending.push(Pending {
                    user: u,
                    sid,
                    record,
                    position: st.fixed,
                    beacons: exs.len() as u32,
                    rssi: rssi.round() as i32,
                    hello: Some(hello),
                    awaiting: None,
                    patient: None,
                });
            }
            *user_us.entry(u).or_default() += start.elapsed().as_secs_f64() * 1e6;
        }
        self.attack.wormhole_suspects += m.wormhole_suspects;
        self.attack.replay_suspects += m.replay_suspects;

        // Patients answer every session opened on one of their records.
        let mut sessions: HashMap<SessionId, (u32, usize, PatientSession)> = HashMap::new();
        let mut patient_us: HashMap<SessionId, f64> = HashMap::new();
        for dev in devices {
            let a = &mut self.world.agents[dev.id as usize];
            let params = &self.pool[dev.params];
            for (tag, pair) in &dev.records {
                for sid in self.relay.pending(tag)? {
                    let start = Instant::now();
                    let Some(hello) = self.relay.fetch(&sid, Direction::UserToPatient)?.pop() else {
                        continue;
                    };
                    match patient_accept(
                        self.scheme.as_ref(),
                        &dev.keys,
                        params,
                        sid,
                        &hello.payload,
                        pair,
                        now,
                        &mut a.crypto,
                    ) {
                        Ok((sess, msg)) => {
                            self.relay.send(envelope(sid, Direction::PatientToUser, msg, now))?;
                            sessions.insert(sid, (dev.id, dev.params, sess));
                        }
                        Err(_) => m.session_errors += 1,
                    }
                    patient_us.insert(sid, start.elapsed().as_secs_f64() * 1e6);
                }
            }
        }

        for pend in &mut pending {
            let start = Instant::now();
            let a = &mut self.world.agents[pend.user as usize];
            let hello = pend.hello.take().expect("hello sent");
            let Some(ann) = self.relay.fetch(&pend.sid, Direction::PatientToUser)?.pop() else {
                m.session_errors += 1;
                continue;
            };
            match hello.respond(
                self.scheme.as_ref(),
                cfg.params,
                &ann.payload,
                &pend.position,
                now,
                ANNOUNCEMENT_MAX_AGE,
                &mut a.crypto,
            ) {
                Ok((awaiting, msg)) => {
                    self.relay.send(envelope(pend.sid, Direction::UserToPatient, msg, now))?;
                    pend.awaiting = Some(awaiting);
                }
                Err(_) => m.session_errors += 1,
            }
            *user_us.entry(pend.user).or_default() += start.elapsed().as_secs_f64() * 1e6;
        }

        for pend in &mut pending {
            let Some((patient, params, sess)) = sessions.remove(&pend.sid) else {
                continue;
            };
            let start = Instant::now();
            let Some(resp) = self.relay.fetch(&pend.sid, Direction::UserToPatient)?.pop() else {
                continue;
            };
            match sess.conclude(&self.pool[params], &resp.payload) {
                Ok((_, _, reply)) => {
                    self.relay.send(envelope(pend.sid, Direction::PatientToUser, reply, now))?;
                    pend.patient = Some(patient);
                }
                Err(_) => m.session_errors += 1,
            }
            *patient_us.entry(pend.sid).or_default() += start.elapsed().as_secs_f64() * 1e6;
        }

        let mut detected = BTreeSet::new();
        let mut exposures: BTreeMap<(u32, u32), (Vec<ExposureSample>, u32)> = BTreeMap::new();
        for pend in pending {
            let start = Instant::now();
            let (Some(awaiting), Some(patient)) = (pend.awaiting, pend.patient) else {
                continue;
            };
            let Some(reply) = self.relay.fetch(&pend.sid, Direction::PatientToUser)?.pop() else {
                m.session_errors += 1;
                continue;
            };
            self.relay.relay.close(&pend.sid);
            let (verdict, d) = match awaiting.finish(&reply.payload) {
                Ok(v) => v,
                Err(_) => {
                    m.session_errors += 1;
                    continue;
                }
            };
            m.fine_sessions += 1;
            let victim = self.world.agents[pend.user as usize].victim;
            if log_victims && victim {
                self.attack.log.push(fine_log_line(&d, verdict));
            }
            match verdict {
                Verdict::Inside => {
                    m.fine_inside += 1;
                    detected.insert((pend.user, patient));
                    let e = exposures.entry((pend.user, patient)).or_default();
                    e.0.push(ExposureSample {
                        beacons: pend.beacons,
                        rssi: pend.rssi,
                    });
                    e.1 = e.1.max(pend.record.coarse_time.day_index);
                }
                Verdict::Outside => {
                    m.fine_outside += 1;
                    if victim {
                        self.attack.fine_rejections += 1;
                    }
                }
            }
            let spent = start.elapsed().as_secs_f64() * 1e6 + patient_us.get(&pend.sid).copied().unwrap_or(0.0);
            *user_us.entry(pend.user).or_default() += spent;
        }
        Ok((detected, exposures))
    }
}

fn envelope(session_id: SessionId, direction: Direction, payload: Vec<u8>, timestamp: u64) -> RelayEnvelope {
    RelayEnvelope {
        session_id,
        direction,
        payload,
        timestamp,
    }
}
