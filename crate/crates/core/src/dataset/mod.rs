//! On-disk datasets: `SFM1` float maps, the TOML manifest, the analytic
//! scene generator and preview export.

mod export;
mod gen;
mod manifest;
mod scene;
mod sfm;

pub use export::{export_stack_png, to_rgb8, write_png, write_ppm};
pub use gen::{gen_synthetic, manifest_path, split_views, view_cameras, view_positions, GenConfig, ViewLayout};
pub use manifest::{write_view_set, Dataset, Manifest, Split, ViewMaps, ViewRecord, FORMAT, MANIFEST_NAME};
pub use scene::{oracle_ray, oracle_render, AnalyticScene, BandTints, Blob, DensityBox, Emission, ORACLE_SAMPLES};
pub use sfm::{decode_header, sfm_read, sfm_read_header, sfm_write, SfmHeader, SfmMap, HEADER_LEN, MAGIC};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn generated() -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            s_num: 2,
            width: 4,
            height: 4,
            n_views: 3,
            n_test: 1,
            oracle_samples: 32,
            ..Default::default()
        };
        let ds = gen_synthetic(&cfg, dir.path()).unwrap();
        (dir, ds)
    }

    #[test]
    fn kappa_and_centers_round_trip() {
        let (dir, ds) = generated();
        let again = Dataset::load(dir.path()).unwrap();
        assert_eq!(again.kappa().to_bits(), ds.kappa().to_bits());
        assert_eq!(again.partition(), ds.partition());
        assert_eq!(again.manifest, ds.manifest);
    }

    #[test]
    fn missing_band_names_path() {
        let (dir, ds) = generated();
        let victim = dir.path().join(&ds.view(1).bands[0]);
        std::fs::remove_file(&victim).unwrap();
        match Dataset::load(dir.path()) {
            Err(Error::MissingFile(p)) => assert_eq!(p, victim),
            other => panic!("expected MissingFile, got {other:?}"),
        }
    }

    #[test]
    fn band_count_mismatch() {
        let (dir, mut ds) = generated();
        ds.manifest.views[0].bands.pop();
        std::fs::write(manifest_path(dir.path()), ds.manifest.to_toml().unwrap()).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::BadPartition(_))));
    }

    #[test]
    fn resized_map_is_dim_mismatch() {
        let (dir, ds) = generated();
        let rel = &ds.view(0).rgb;
        sfm_write(dir.path().join(rel), &SfmMap::new(2, 2, 3, 0.0, vec![0.0; 12]).unwrap()).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn singular_pose_rejected() {
        let (dir, mut ds) = generated();
        for v in &mut ds.manifest.views[0].pose[..12] {
            *v = 0.0;
        }
        std::fs::write(manifest_path(dir.path()), ds.manifest.to_toml().unwrap()).unwrap();
        assert!(Dataset::load(dir.path()).is_err());
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let cfg = GenConfig {
            s_num: 2,
            width: 4,
            height: 4,
            n_views: 4,
            n_test: 1,
            oracle_samples: 32,
            seed: 5,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_synthetic(&cfg, a.path()).unwrap();
        gen_synthetic(&cfg, b.path()).unwrap();
        let mut names: Vec<_> = walk(a.path());
        names.sort();
        assert!(!names.is_empty());
        for rel in names {
            assert_eq!(
                std::fs::read(a.path().join(&rel)).unwrap(),
                std::fs::read(b.path().join(&rel)).unwrap(),
                "{}",
                rel.display()
            );
        }
    }

    #[test]
    fn view_set_round_trips_maps() {
        let (_d, ds) = generated();
        let out = tempfile::tempdir().unwrap();
        let views: Vec<ViewMaps> = ds
            .split(Split::Test)
            .into_iter()
            .map(|i| ViewMaps {
                name: ds.view(i).name.clone(),
                split: Split::Test,
                camera: ds.camera(i).clone(),
                stack: ds.load_stack(i).unwrap(),
                rgb: ds.load_rgb(i).unwrap(),
            })
            .collect();
        let copy = write_view_set(out.path(), &ds.manifest, &views).unwrap();
        assert_eq!(copy.len(), 1);
        let i = ds.split(Split::Test)[0];
        assert_eq!(copy.load_stack(0).unwrap(), ds.load_stack(i).unwrap());
        assert_eq!(copy.load_rgb(0).unwrap(), ds.load_rgb(i).unwrap());
        assert_eq!(copy.camera(0), ds.camera(i));
    }

    fn walk(root: &std::path::Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p.strip_prefix(root).unwrap().to_path_buf());
                }
            }
        }
        out
    }
}
