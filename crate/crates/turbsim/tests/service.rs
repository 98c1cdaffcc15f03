use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use futures::StreamExt;
use http_body_util::BodyExt;
use std::sync::Arc;
use std::time::{Duration, Instant};
use tokio_tungstenite::tungstenite::Message;
use tower::ServiceExt;
use turbsim::service::{router, AppState};
use turbsim::RunConfig;
use turbsim_core::fieldgen::ZernikeField;
use turbsim_core::psf::render_exact;
use turbsim_core::raster::{natural_scene, Raster};

const SEED: u64 = 5;

fn small_config(samples: usize) -> RunConfig {
    let mut cfg = RunConfig::default().resized(32, 32);
    cfg.optics.num_modes = 10;
    cfg.basis.samples = samples;
    cfg.basis.kernels = 8;
    cfg
}

fn app(samples: usize) -> (Arc<AppState>, axum::Router) {
    let state = AppState::new(small_config(samples), SEED).unwrap();
    (state.clone(), router(state))
}

struct Reply {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap()
    }

    fn header(&self, name: &str) -> &str {
        self.headers.get(name).unwrap().to_str().unwrap()
    }
}

async fn call(app: &axum::Router, method: Method, uri: &str, body: impl Into<Body>) -> Reply {
    let req = Request::builder().method(method).uri(uri).body(body.into()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, headers, body }
}

async fn get(app: &axum::Router, uri: &str) -> Reply {
    call(app, Method::GET, uri, Body::empty()).await
}

fn decode(png: &[u8]) -> Raster {
    Raster::from_png_bytes(png).unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn params_sessions_and_errors() {
    let (_, app) = app(200);
    let r = get(&app, "/api/params").await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["image_width_px"], 32);

    let r = call(&app, Method::PUT, "/api/params", r#"{"d_over_r0": "strong", "colour": 1}"#).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    let fields: Vec<String> = r.json()["errors"].as_array().unwrap().iter().map(|e| e["field"].as_str().unwrap().to_string()).collect();
    assert!(fields.contains(&"d_over_r0".to_string()) && fields.contains(&"colour".to_string()), "{fields:?}");
    let r = call(&app, Method::PUT, "/api/params", r#"{"d_over_r0": -2}"#).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.json()["errors"][0]["field"], "d_over_r0");
    let r = call(&app, Method::PUT, "/api/params", "{not json").await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert!(r.json()["errors"][0]["message"].as_str().unwrap().contains("JSON"));

    let r = call(&app, Method::PUT, "/api/params", r#"{"d_over_r0": 2.2}"#).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["d_over_r0"], 2.2);
    assert_eq!(r.json()["config_version"], 2);
    assert_eq!(get(&app, "/api/params").await.json()["d_over_r0"], 2.2);

    assert_eq!(get(&app, "/api/params?session=nope").await.status, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/api/frame?session=nope").await.status, StatusCode::NOT_FOUND);
    let r = call(&app, Method::POST, "/api/session", Body::empty()).await;
    assert_eq!(r.status, StatusCode::CREATED);
    let id = r.json()["session"].as_str().unwrap().to_string();
    // A new session starts from the base configuration.
    assert_eq!(get(&app, &format!("/api/params?session={id}")).await.json()["d_over_r0"], 2.0);

    let r = call(&app, Method::POST, "/api/source", "garbage").await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.json()["errors"][0]["field"], "source");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn frames_panels_and_stats() {
    let (_, app) = app(200);
    let r = get(&app, "/api/frame").await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.header("content-type"), "image/png");
    let img = decode(&r.body);
    assert_eq!((img.width, img.height), (32, 32));

    let r = get(&app, "/api/psf-grid?n=4").await;
    assert_eq!(r.status, StatusCode::OK);
    let grid = image::load_from_memory(&r.body).unwrap().to_luma8();
    assert_eq!(grid.dimensions(), (4 * 33, 4 * 33));
    for ty in 0..4 {
        for tx in 0..4 {
            let peak = (0..33).flat_map(|y| (0..33).map(move |x| (x, y))).map(|(x, y)| grid.get_pixel(tx * 33 + x, ty * 33 + y)[0]).max();
            assert_eq!(peak, Some(255), "tile ({tx}, {ty})");
        }
    }
    let r = get(&app, "/api/psf-grid").await;
    assert_eq!(image::load_from_memory(&r.body).unwrap().width(), 8 * 33);
    assert_eq!(get(&app, "/api/psf-grid?n=0").await.status, StatusCode::BAD_REQUEST);

    let r = get(&app, "/api/displacement?step=8").await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].as_array().unwrap().len(), 4);
    assert_eq!(rows[0][0].as_array().unwrap().len(), 2);
    assert!(rows.iter().flat_map(|r| r.as_array().unwrap()).any(|p| p[0].as_f64().unwrap() != 0.0));

    let s = get(&app, "/api/stats").await.json();
    for key in ["sample_ms", "beta_ms", "render_ms", "fps", "refitting", "config_version", "frame_index"] {
        assert!(s.get(key).is_some(), "missing {key}");
    }
    assert!(s["render_ms"].as_f64().unwrap() > 0.0);

    // A pushed source of another size is resized and used for the next frames.
    let flat = Raster::gray(50, 40, vec![0.5; 2000]).unwrap().to_png_bytes(false).unwrap();
    let r = call(&app, Method::POST, "/api/source", flat).await;
    assert_eq!(r.status, StatusCode::OK);
    let img = decode(&get(&app, "/api/frame").await.body);
    assert_eq!((img.width, img.height), (32, 32));
    // A flat scene stays flat under any normalized blur.
    assert!(img.planes[0].iter().all(|v| (v - 0.5).abs() <= 2.0 / 255.0));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn zero_strength_gives_the_diffraction_limited_frame() {
    let (_, app) = app(200);
    assert_eq!(get(&app, "/api/frame").await.status, StatusCode::OK);
    let r = call(&app, Method::PUT, "/api/params", r#"{"d_over_r0": 0}"#).await;
    assert_eq!(r.status, StatusCode::OK);
    let cfg = small_config(200);
    let mut optics = cfg.optics.clone();
    optics.d_over_r0 = 0.0;
    let want = render_exact(&natural_scene(32, 32, SEED), &ZernikeField::zeros(32, 32, 10), &optics).unwrap();
    let start = Instant::now();
    loop {
        let r = get(&app, "/api/frame").await;
        assert_eq!(r.header("x-config-version"), "2");
        if r.header("x-stale-basis") == "false" {
            let got = decode(&r.body);
            let worst = got.planes.iter().flatten().zip(want.planes.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(worst <= 0.5 / 255.0 + 1e-9, "max difference {worst}");
            break;
        }
        assert!(start.elapsed() < Duration::from_secs(60), "refit never finished");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    let d = get(&app, "/api/displacement").await.json();
    assert!(d["rows"].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()).all(|p| p[0] == 0.0 && p[1] == 0.0));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn geometry_changes_swap_in() {
    let (_, app) = app(200);
    assert_eq!(get(&app, "/api/frame").await.status, StatusCode::OK);
    let r = call(&app, Method::PUT, "/api/params", r#"{"image_width_px": 48, "num_modes": 6}"#).await;
    assert_eq!(r.status, StatusCode::OK);
    let r = get(&app, "/api/frame").await;
    assert_eq!(r.header("x-config-version"), "2");
    let img = decode(&r.body);
    assert_eq!((img.width, img.height), (48, 32));
    let s = get(&app, "/api/stats").await.json();
    assert_eq!(s["preparing"], false);
}

async fn listen(app: axum::Router) -> std::net::SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    addr
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stream_pushes_ordered_binary_frames() {
    let (_, app) = app(200);
    let addr = listen(app).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/api/stream")).await.unwrap();
    let mut last = 0u32;
    for _ in 0..4 {
        let msg = tokio::time::timeout(Duration::from_secs(60), ws.next()).await.unwrap().unwrap().unwrap();
        let Message::Binary(bytes) = msg else { panic!("expected a binary message, got {msg:?}") };
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        let (index, w, h) = (word(0), word(1), word(2));
        assert!(index > last);
        last = index;
        assert_eq!((w, h), (32, 32));
        let img = decode(&bytes[12..]);
        assert_eq!((img.width as u32, img.height as u32), (w, h));
    }
    assert!(tokio_tungstenite::connect_async(format!("ws://{addr}/api/stream?session=nope")).await.is_err());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn large_strength_changes_refit_in_the_background() {
    // A larger training set makes the refit slow enough to observe.
    let (_, app) = app(3000);
    let addr = listen(app.clone()).await;
    assert_eq!(get(&app, "/api/frame").await.status, StatusCode::OK);

    // Within the reuse window: no refit and the basis stays current.
    call(&app, Method::PUT, "/api/params", r#"{"d_over_r0": 2.4}"#).await;
    let r = get(&app, "/api/frame").await;
    assert_eq!(r.header("x-stale-basis"), "false");
    assert_eq!(get(&app, "/api/stats").await.json()["refitting"], false);

    let (mut events, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/api/events")).await.unwrap();
    let (mut stream, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/api/stream")).await.unwrap();
    call(&app, Method::PUT, "/api/params", r#"{"d_over_r0": 4.0}"#).await;
    let mut saw_refit = false;
    let mut frames_during_refit = 0;
    let start = Instant::now();
    loop {
        tokio::select! {
            Some(Ok(Message::Text(t))) = events.next() => {
                let s: serde_json::Value = serde_json::from_str(&t).unwrap();
                assert!(s.get("fps").is_some());
                if s["refitting"] == true {
                    saw_refit = true;
                } else if saw_refit {
                    break;
                }
            }
            Some(Ok(Message::Binary(_))) = stream.next() => {
                if saw_refit {
                    frames_during_refit += 1;
                }
            }
        }
        assert!(start.elapsed() < Duration::from_secs(120), "refit did not finish");
    }
    assert!(saw_refit);
    assert!(frames_during_refit > 0, "streaming stalled during the refit");
    let start = Instant::now();
    loop {
        let r = get(&app, "/api/frame").await;
        if r.header("x-stale-basis") == "false" {
            break;
        }
        assert!(start.elapsed() < Duration::from_secs(10));
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}
