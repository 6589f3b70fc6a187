use powshift::event_io::{
    build_event_frame, gen_synthetic_bar, parse_event_csv, parse_events_auto, parse_evt8, read_pgm,
    window_iter, write_event_csv, write_evt8, write_pgm, Event, EventError, EventStream, Polarity,
    SynthConfig,
};
use proptest::prelude::*;

fn arb_stream() -> impl Strategy<Value = EventStream> {
    (1u16..64, 1u16..64).prop_flat_map(|(w, h)| {
        prop::collection::vec((0u32..5000, 0..w, 0..h, any::<bool>()), 0..200).prop_map(
            move |raw| {
                let mut t = 0;
                let events = raw
                    .into_iter()
                    .map(|(dt, x, y, pos)| {
                        t += dt;
                        Event::new(t, x, y, if pos { Polarity::Pos } else { Polarity::Neg })
                    })
                    .collect();
                EventStream::new(w, h, events).unwrap()
            },
        )
    })
}

proptest! {
    #[test]
    fn evt8_round_trip(stream in arb_stream()) {
        let bytes = write_evt8(&stream);
        let back = parse_evt8(&bytes).unwrap();
        prop_assert_eq!(&back, &stream);
        prop_assert_eq!(write_evt8(&back), bytes);
    }

    #[test]
    fn csv_round_trip(stream in arb_stream()) {
        let text = write_event_csv(&stream);
        prop_assert_eq!(parse_event_csv(&text).unwrap(), stream);
    }

    #[test]
    fn window_count_and_coverage(stream in arb_stream(), tau in 1u32..3000) {
        let frames: Vec<_> = window_iter(&stream, tau).collect();
        let expected = stream.t_max().map_or(0, |t| (t as usize + 1).div_ceil(tau as usize));
        prop_assert_eq!(frames.len(), expected);
        for f in &frames {
            prop_assert!(f.values().iter().all(|v| (-1..=1).contains(v)));
        }
        // Every pixel touched in a window is nonzero in that window's frame.
        for e in stream.events() {
            let k = (e.t / tau) as usize;
            prop_assert_ne!(frames[k].get(e.x, e.y), 0);
        }
    }

    #[test]
    fn pgm_round_trip(stream in arb_stream(), tau in 1u32..3000) {
        for f in window_iter(&stream, tau) {
            let back = read_pgm(&write_pgm(&f)).unwrap();
            prop_assert_eq!(back.values(), f.values());
        }
    }
}

#[test]
fn latest_event_wins() {
    let stream = EventStream::new(
        4,
        4,
        vec![
            Event::new(0, 1, 1, Polarity::Pos),
            Event::new(5, 1, 1, Polarity::Neg),
            Event::new(5, 2, 2, Polarity::Neg),
            Event::new(5, 2, 2, Polarity::Pos),
        ],
    )
    .unwrap();
    let f = window_iter(&stream, 10).next().unwrap();
    assert_eq!(f.get(1, 1), -1);
    assert_eq!(f.get(2, 2), 1);
    assert_eq!(f.nonzero_count(), 2);
}

#[test]
fn one_second_stream_gives_one_hundred_frames() {
    let events = (0..1000)
        .map(|i| Event::new(i * 1000 + 999, 0, 0, Polarity::Pos))
        .collect();
    let stream = EventStream::new(2, 2, events).unwrap();
    assert_eq!(window_iter(&stream, 10_000).count(), 100);
    assert_eq!(window_iter(&EventStream::empty(2, 2), 10_000).count(), 0);
}

#[test]
fn window_boundaries_are_half_open() {
    let stream = EventStream::new(
        2,
        1,
        vec![
            Event::new(9, 0, 0, Polarity::Pos),
            Event::new(10, 1, 0, Polarity::Neg),
        ],
    )
    .unwrap();
    let frames: Vec<_> = window_iter(&stream, 10).collect();
    assert_eq!(frames.len(), 2);
    assert_eq!(frames[0].values(), &[1, 0]);
    assert_eq!(frames[1].values(), &[0, -1]);
    // The single-frame builder covers (start, start + tau] instead.
    assert_eq!(build_event_frame(&stream, 0, 10).values(), &[1, -1]);
    assert_eq!(build_event_frame(&stream, 9, 10).values(), &[0, -1]);
}

#[test]
fn malformed_inputs_are_rejected() {
    assert_eq!(parse_evt8(b"EVT9\x01\0\0\0"), Err(EventError::BadMagic));
    assert_eq!(parse_events_auto(b"garbage"), Err(EventError::BadMagic));
    let stream = EventStream::new(8, 8, vec![Event::new(3, 1, 2, Polarity::Pos)]).unwrap();
    let bytes = write_evt8(&stream);
    assert!(matches!(
        parse_evt8(&bytes[..bytes.len() - 1]),
        Err(EventError::TruncatedRecord(_))
    ));
    assert!(matches!(
        EventStream::new(4, 4, vec![Event::new(0, 4, 0, Polarity::Pos)]),
        Err(EventError::OutOfBounds { x: 4, y: 0 })
    ));
    assert!(matches!(
        parse_event_csv("t_us,x,y,p\n5,0,0,1\n4,0,0,1\n"),
        Err(EventError::NonMonotoneTimestamp { .. })
    ));
    assert!(matches!(
        gen_synthetic_bar(8, 0, &SynthConfig::default()),
        Err(EventError::BadDirection(8))
    ));
}

#[test]
fn synthetic_bar_is_deterministic_and_labelled() {
    let cfg = SynthConfig::default();
    for dir in 0..8 {
        let (a, label) = gen_synthetic_bar(dir, 42, &cfg).unwrap();
        let (b, _) = gen_synthetic_bar(dir, 42, &cfg).unwrap();
        assert_eq!(label, dir);
        assert_eq!(write_evt8(&a), write_evt8(&b));
        assert!(!a.is_empty());
        assert!(a.t_max().unwrap() < cfg.duration_us());
    }
    let (a, _) = gen_synthetic_bar(0, 1, &cfg).unwrap();
    let (b, _) = gen_synthetic_bar(0, 2, &cfg).unwrap();
    assert_ne!(a, b);
}
