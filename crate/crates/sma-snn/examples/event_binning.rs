//! From an address-event stream to a dense frame tensor.
//!
//! Builds a tiny hand-written stream, bins it into frames with one plane
//! per polarity, and prints the result. Streams are ordered lists, so
//! binning is index-based: N events over T frames means floor(N/T) events
//! per frame with the last frame absorbing the remainder, and the frame
//! mass always equals the event count.
//!
//!     cargo run --example event_binning

use sma_snn::events::{bin_events, slice_bounds, Event, EventStream};
use sma_snn::Result;

fn main() -> Result<()> {
    // 4x4 sensor, seven events; with T = 3 the frames take 2, 2 and 3
    let stream = EventStream {
        width: 4,
        height: 4,
        label: 0,
        events: vec![
            Event { x: 0, y: 0, p: 1 },
            Event { x: 1, y: 0, p: 0 },
            Event { x: 1, y: 0, p: 0 },
            Event { x: 2, y: 3, p: 1 },
            Event { x: 2, y: 3, p: 1 },
            Event { x: 3, y: 3, p: 0 },
            Event { x: 3, y: 3, p: 0 },
        ],
    };

    let t = 3;
    println!("slice bounds: {:?}", slice_bounds(stream.events.len(), t));
    let frames = bin_events(&stream, t)?;
    println!("binned {} events into {}", stream.events.len(), frames.shape());

    let d = frames.dims().to_vec();
    let (c, h, w) = (d[1], d[2], d[3]);
    let data = frames.data();
    let mut total = 0.0;
    for step in 0..t {
        for (plane, name) in [(0, "off"), (1, "on")] {
            println!("\nframe {} {} plane:", step, name);
            for y in 0..h {
                let mut row = String::new();
                for x in 0..w {
                    let v = data[((step * c + plane) * h + y) * w + x];
                    total += v;
                    row.push_str(&format!(" {:>3}", v));
                }
                println!("{}", row);
            }
        }
    }
    println!("\nframe mass {} == event count {}", total, stream.events.len());
    Ok(())
}
