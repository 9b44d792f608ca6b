//! Generate maze and jigsaw datasets, write them to JSONL, and read them
//! back.

use sketchlm::dataset::{generate_dataset, read_dataset, write_dataset, TaskKind};
use sketchlm::taskgen::MazeSpec;

fn main() {
    let dir = std::env::temp_dir().join("sketchlm-demo-data");
    std::fs::create_dir_all(&dir).unwrap();

    let maze = generate_dataset(TaskKind::Maze, 200, 0, 27, &MazeSpec::default()).unwrap();
    let jigsaw = generate_dataset(TaskKind::Jigsaw, 200, 0, 27, &MazeSpec::default()).unwrap();

    for (name, ds) in [("maze", &maze), ("jigsaw", &jigsaw)] {
        let path = dir.join(format!("{name}.jsonl"));
        write_dataset(ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(&back, ds);
        let mean_steps: f64 = ds.samples.iter().map(|s| s.steps.len() as f64).sum::<f64>()
            / ds.samples.len() as f64;
        println!(
            "{name}: {} samples -> {} ({} words, images {}x{}, mean steps {mean_steps:.2})",
            ds.samples.len(),
            path.display(),
            ds.header.words.len(),
            ds.header.img_h,
            ds.header.img_w,
        );
    }

    let sample = &maze.samples[0];
    println!("\nexample maze question: {:?}", sample.question);
    for step in &sample.steps {
        println!("  think: {:?}", step.think);
    }
    println!("  answer: {:?}", sample.answer);
}
