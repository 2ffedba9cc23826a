//! External segmentation and depth adapters against a scripted subprocess
//! and a local HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use trajvid::core::Frame;
use trajvid::io::raster;
use trajvid::providers::{encode_tensor, DepthProvider, Endpoint, External, Provenance, SegmentationProvider};
use trajvid::Error;

fn test_frame(h: usize, w: usize) -> Frame {
    let data = (0..3 * h * w).map(|i| (i % 17) as f32 / 16.0).collect();
    Frame::rgb(h, w, data).unwrap()
}

/// `sh -c` script that drains stdin, logs its task argument and prints `response`.
fn scripted(dir: &Path, response: &[u8]) -> External {
    let resp = dir.join("response.bin");
    std::fs::write(&resp, response).unwrap();
    let script = format!(
        "cat > '{}'; echo \"$1\" > '{}'; cat '{}'",
        dir.join("stdin.png").display(),
        dir.join("task.txt").display(),
        resp.display()
    );
    External::new(Endpoint::Command {
        program: "sh".into(),
        args: vec!["-c".into(), script, "sh".into()],
    })
}

#[test]
fn subprocess_segmentation_passes_the_frame_and_task() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<f32> = (0..2 * 8 * 12).map(|i| i as f32 * 0.25 - 3.0).collect();
    let p = scripted(dir.path(), &encode_tensor(2, 8, 12, &data));
    let frame = test_frame(8, 12);
    let seg = p.segment(&frame).unwrap();
    assert_eq!((seg.channels, seg.height, seg.width), (2, 8, 12));
    assert_eq!(seg.data, data);
    assert_eq!(seg.provenance, Provenance::PretrainedExternal);
    assert!(!seg.one_hot);
    assert_eq!(std::fs::read_to_string(dir.path().join("task.txt")).unwrap().trim(), "segment");
    let sent = raster::decode_rgb(&std::fs::read(dir.path().join("stdin.png")).unwrap()).unwrap();
    assert_eq!(raster::rgb8(&sent), raster::rgb8(&frame));
}

#[test]
fn subprocess_segmentation_is_resized_to_the_frame() {
    let dir = tempfile::tempdir().unwrap();
    let p = scripted(dir.path(), &encode_tensor(3, 2, 2, &[0.5; 12]));
    let seg = p.segment(&test_frame(16, 16)).unwrap();
    assert_eq!((seg.channels, seg.height, seg.width), (3, 16, 16));
    assert!(seg.data.iter().all(|&v| (v - 0.5).abs() < 1e-6));
}

#[test]
fn subprocess_depth_png_and_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let depth: Vec<f32> = (0..64).map(|i| i as f32 / 63.0).collect();
    let png = raster::encode_depth16(&Frame::depth(8, 8, depth.clone()).unwrap()).unwrap();
    let d = scripted(dir.path(), &png).estimate_depth(&test_frame(8, 8)).unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("task.txt")).unwrap().trim(), "depth");
    for (a, b) in d.frame.data().iter().zip(&depth) {
        assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
    }

    // metric depth outside [0, 1] is min-max normalized, order preserved
    let dir = tempfile::tempdir().unwrap();
    let raw: Vec<f32> = (0..64).map(|i| 2.0 + 2.0 * ((i * 29) % 64) as f32).collect();
    let d = scripted(dir.path(), &encode_tensor(1, 8, 8, &raw))
        .estimate_depth(&test_frame(8, 8))
        .unwrap();
    for (a, r) in d.frame.data().iter().zip(&raw) {
        assert!((a - (r - 2.0) / 126.0).abs() < 1e-6);
    }
    assert_eq!(d.provenance, Provenance::PretrainedExternal);
}

#[test]
fn subprocess_failures_are_reported() {
    let failing = External::new(Endpoint::Command {
        program: "sh".into(),
        args: vec!["-c".into(), "cat > /dev/null; echo model missing >&2; exit 4".into(), "sh".into()],
    });
    match failing.segment(&test_frame(8, 8)) {
        Err(Error::ProviderUnavailable(m)) => assert!(m.contains("model missing"), "{m}"),
        other => panic!("{other:?}"),
    }

    let dir = tempfile::tempdir().unwrap();
    let mut short = encode_tensor(1, 8, 8, &[0.0; 64]);
    short.truncate(20);
    assert!(matches!(
        scripted(dir.path(), &short).segment(&test_frame(8, 8)),
        Err(Error::ProviderUnavailable(_))
    ));

    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        scripted(dir.path(), &encode_tensor(2, 8, 8, &[0.0; 128])).estimate_depth(&test_frame(8, 8)),
        Err(Error::ProviderUnavailable(_))
    ));
}

struct Seen {
    method: String,
    path: String,
    content_type: String,
    body: Vec<u8>,
}

/// Serves one canned response per connection and reports each request.
fn serve(responses: Vec<Vec<u8>>) -> (String, mpsc::Receiver<Seen>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for body in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let mut parts = line.split_whitespace();
            let (method, path) = (parts.next().unwrap().to_string(), parts.next().unwrap().to_string());
            let (mut len, mut content_type) = (0usize, String::new());
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let (k, v) = h.split_once(':').unwrap();
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "content-type" => content_type = v.trim().to_string(),
                    _ => {}
                }
            }
            let mut req = vec![0u8; len];
            reader.read_exact(&mut req).unwrap();
            tx.send(Seen {
                method,
                path,
                content_type,
                body: req,
            })
            .unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/octet-stream\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                body.len()
            )
            .unwrap();
            stream.write_all(&body).unwrap();
        }
    });
    (url, rx)
}

#[test]
fn http_provider_posts_png_to_task_paths() {
    let seg: Vec<f32> = (0..3 * 8 * 8).map(|i| (i % 5) as f32).collect();
    let depth = raster::encode_depth16(&Frame::depth(8, 8, vec![0.25; 64]).unwrap()).unwrap();
    let (url, rx) = serve(vec![encode_tensor(3, 8, 8, &seg), depth]);
    let p = External::new(Endpoint::Http { url: format!("{url}/") });
    let frame = test_frame(8, 8);

    let s = p.segment(&frame).unwrap();
    assert_eq!(s.data, seg);
    let req = rx.recv().unwrap();
    assert_eq!((req.method.as_str(), req.path.as_str()), ("POST", "/segment"));
    assert_eq!(req.content_type, "image/png");
    assert_eq!(raster::rgb8(&raster::decode_rgb(&req.body).unwrap()), raster::rgb8(&frame));

    let d = p.estimate_depth(&frame).unwrap();
    assert_eq!(rx.recv().unwrap().path, "/depth");
    assert!(d.frame.data().iter().all(|&v| (v - 0.25).abs() < 1e-4));
    assert_eq!(SegmentationProvider::id(&p), format!("external-http:{url}/"));
}

#[test]
fn http_provider_times_out_and_reports_refusals() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    // accept and hold the connection without answering
    let holder = std::thread::spawn(move || {
        let (s, _) = listener.accept().unwrap();
        std::thread::sleep(Duration::from_secs(4));
        drop(s);
    });
    let p = External {
        endpoint: Endpoint::Http { url },
        timeout: Duration::from_millis(500),
    };
    let start = Instant::now();
    assert!(matches!(p.segment(&test_frame(8, 8)), Err(Error::ProviderUnavailable(_))));
    assert!(start.elapsed() < Duration::from_secs(3), "{:?}", start.elapsed());
    holder.join().unwrap();

    let closed = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", closed.local_addr().unwrap());
    drop(closed);
    let p = External::new(Endpoint::Http { url });
    assert!(matches!(p.estimate_depth(&test_frame(8, 8)), Err(Error::ProviderUnavailable(_))));
}
