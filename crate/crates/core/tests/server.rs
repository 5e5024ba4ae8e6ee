use std::io::Read;
use std::net::TcpStream;
use std::sync::Arc;
use std::time::Duration;

use cfsl::client::Client;
use cfsl::learners::{fit_stream, Hyperparams, LearnerKind};
use cfsl::protocol::{Body, Frame, StoredKind};
use cfsl::sampler::sample_episode;
use cfsl::server::{spawn, EpisodeService, ServerHandle, ServerOptions};
use cfsl::session::{EntryKind, EpisodeSession};
use cfsl::synth::{cluster_pack, ClusterSpec};
use cfsl::{DatasetPack, TaskConfig};

fn start(config: TaskConfig) -> (Arc<DatasetPack>, ServerHandle) {
    let pack = Arc::new(cluster_pack(&ClusterSpec::default()));
    let service = EpisodeService::new(pack.clone(), config, ServerOptions::default()).unwrap();
    let handle = spawn(Arc::new(service), "127.0.0.1:0").unwrap();
    (pack, handle)
}

#[test]
fn happy_path_scores_an_episode() {
    let config = TaskConfig::five_way_one_shot(3, 1, false);
    let (pack, server) = start(config);
    let mut c = Client::connect(server.local_addr()).unwrap();
    let info = c.hello().unwrap();
    assert_eq!(info.config, config);
    assert_eq!(info.geometry, (8, 8, 1));
    let episode = sample_episode(&pack, &config, info.episode_index).unwrap();
    for set in &episode.support_sets {
        let remote = c.next_support().unwrap();
        assert_eq!(remote.position, set.position);
        assert_eq!(remote.labels, set.entries.iter().map(|e| e.label).collect::<Vec<_>>());
        let expected: Vec<u8> = set
            .entries
            .iter()
            .flat_map(|e| pack.sample(e.sample.class, e.sample.instance).to_vec())
            .collect();
        assert_eq!(remote.pixels, expected);
        assert_eq!((remote.layout.count, remote.layout.len), (5, 5 * 64));
    }
    assert_eq!(c.next_support().unwrap_err().code(), Some("stream_exhausted"));
    let (layout, pixels) = c.get_target().unwrap();
    assert_eq!(layout.count, 75);
    assert_eq!(pixels.len(), 75 * 64);
    let truth: Vec<u32> = episode.target_set.entries.iter().map(|e| e.label).collect();
    let score = c.predict(&truth).unwrap();
    assert_eq!((score.accuracy, score.correct, score.total, score.atm), (1.0, 75, 75, 0.0));
    assert_eq!(score.episode_index, info.episode_index);
}

#[test]
fn byte_accounting_matches_in_process_run() {
    let config = TaskConfig::five_way_one_shot(4, 2, false);
    let (pack, server) = start(config);
    let mut c = Client::connect(server.local_addr()).unwrap();
    for _ in 0..5 {
        let info = c.hello().unwrap();
        let episode = sample_episode(&pack, &config, info.episode_index).unwrap();

        // in-process prototype run
        let mut local = EpisodeSession::new(pack.clone(), episode);
        let mut model = fit_stream(LearnerKind::Prototype, &mut local, Hyperparams::default()).unwrap();
        let targets: Vec<Vec<u8>> = local.request_target().unwrap().inputs.iter().map(|i| i.to_vec()).collect();
        let refs: Vec<&[u8]> = targets.iter().map(Vec::as_slice).collect();
        let predictions = model.predict(&refs).unwrap();
        let entries = local.bank().entries().to_vec();
        let local_score = local.submit_predictions(&predictions).unwrap();

        // the same footprint reported over the wire
        for _ in 0..config.nss {
            c.next_support().unwrap();
        }
        for e in &entries {
            let kind = match e.kind {
                EntryKind::Representation => StoredKind::Representation,
                EntryKind::Label => StoredKind::Label,
            };
            c.store_bytes(&e.tag, e.len, e.element_width, kind).unwrap();
        }
        let (_, pixels) = c.get_target().unwrap();
        assert_eq!(pixels, targets.concat());
        let remote = c.predict(&predictions).unwrap();
        assert_eq!(remote.atm, local_score.atm.atm);
        assert_eq!(remote.memory_bytes, local_score.atm.memory_bytes);
        assert_eq!(remote.accuracy, local_score.accuracy);
        assert!(remote.memory_bytes > 0);
    }
}

#[test]
fn concurrent_sessions_have_independent_cursors() {
    let config = TaskConfig::five_way_one_shot(5, 1, true);
    let (_, server) = start(config);
    let addr = server.local_addr();
    let threads: Vec<_> = (0..4)
        .map(|t| {
            std::thread::spawn(move || {
                let mut c = Client::connect(addr).unwrap();
                let mut indices = Vec::new();
                for _ in 0..5 {
                    indices.push(c.hello().unwrap().episode_index);
                    for p in 1..=(1 + t % 5) {
                        assert_eq!(c.next_support().unwrap().position, p);
                    }
                }
                indices
            })
        })
        .collect();
    let mut all: Vec<u64> = threads.into_iter().flat_map(|t| t.join().unwrap()).collect();
    all.sort();
    assert_eq!(all, (0..20).collect::<Vec<_>>());

    // two sessions on one connection do not share a cursor
    let mut a = Client::connect(addr).unwrap();
    let mut b = Client::connect(addr).unwrap();
    a.hello().unwrap();
    b.hello().unwrap();
    a.next_support().unwrap();
    a.next_support().unwrap();
    assert_eq!(b.next_support().unwrap().position, 1);
    assert_eq!(a.next_support().unwrap().position, 3);
}

#[test]
fn protocol_errors_keep_the_connection() {
    let (_, server) = start(TaskConfig::five_way_one_shot(2, 1, false));
    let mut c = Client::connect(server.local_addr()).unwrap();
    assert_eq!(c.hello_with_version(99).unwrap_err().code(), Some("unsupported_version"));
    let info = c.hello().unwrap();

    let mut raw = br#"{"type":"TELEPORT","session_id":0,"seq":50}"#.to_vec();
    raw.push(b'\n');
    let mut framed = (raw.len() as u32).to_be_bytes().to_vec();
    framed.extend(raw);
    c.send_raw(&framed).unwrap();
    match c.read_reply().unwrap().header.body {
        Body::Error { code, .. } => assert_eq!(code, "unknown_type"),
        other => panic!("{other:?}"),
    }

    let stale = Frame::new(Body::NextSupport { index: None }, Some(info.session_id), 0);
    match c.exchange(&stale).unwrap().header.body {
        Body::Error { code, .. } => assert_eq!(code, "stale_seq"),
        other => panic!("{other:?}"),
    }
    let foreign = Frame::new(Body::GetTarget, Some(12345), 100);
    match c.exchange(&foreign).unwrap().header.body {
        Body::Error { code, .. } => assert_eq!(code, "unknown_session"),
        other => panic!("{other:?}"),
    }
    assert_eq!(c.get_target().unwrap_err().code(), Some("target_not_ready"));
    assert_eq!(c.next_support().unwrap().position, 1);
}

#[test]
fn malformed_frames_close_the_connection() {
    let (_, server) = start(TaskConfig::five_way_one_shot(2, 1, false));
    for garbage in [
        b"\x00\x00\x00\x05hello".to_vec(),
        b"\x00\x00\x00\x03{}\n".to_vec(),
        {
            let body = b"{\"type\":\"HELLO\",\"version\":1,\"seq\":1}\nxyz";
            let mut f = (body.len() as u32).to_be_bytes().to_vec();
            f.extend_from_slice(body);
            f
        },
    ] {
        let mut c = Client::connect(server.local_addr()).unwrap();
        c.send_raw(&garbage).unwrap();
        assert!(c.read_reply().is_err());
    }
    // a raw socket sees EOF
    let mut s = TcpStream::connect(server.local_addr()).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    std::io::Write::write_all(&mut s, b"\xff\xff\xff\xff").unwrap();
    let mut buf = [0u8; 1];
    assert_eq!(s.read(&mut buf).unwrap(), 0);
}
