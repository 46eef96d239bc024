use std::path::Path;

use super::backend::{Backend, Namespace};
use super::StoreError;
use crate::model::OrganisationalFeatureModel;
use crate::transform::{ComponentQuery, TransformationComponent};

/// Serves the factory with transformation components and device schemas.
pub struct ArtifactStore {
    backend: Box<dyn Backend>,
    components: Vec<TransformationComponent>,
}

impl ArtifactStore {
    pub fn open(backend: Box<dyn Backend>) -> Result<Self, StoreError> {
        let mut components = Vec::new();
        for key in backend.keys(Namespace::Components)? {
            let bytes = backend
                .get(Namespace::Components, &key)?
                .ok_or_else(|| StoreError::not_found("component", &key))?;
            let c: TransformationComponent = serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
                what: "component".into(),
                key: key.clone(),
                detail: e.to_string(),
            })?;
            components.push(c);
        }
        let mut store = ArtifactStore { backend, components };
        store.sort();
        Ok(store)
    }

    fn sort(&mut self) {
        self.components
            .sort_by(|a, b| (a.key(), &a.os.versions.to_string(), &a.name).cmp(&(b.key(), &b.os.versions.to_string(), &b.name)));
    }

    /// Adds a component; rejected if its name is taken or its version range
    /// overlaps another component with the same key.
    pub fn put_component(&mut self, component: TransformationComponent) -> Result<(), StoreError> {
        let c = component.normalized().map_err(|e| StoreError::Invalid(e.to_string()))?;
        if let Some(existing) = self.components.iter().find(|e| e.name == c.name) {
            if *existing == c {
                return Ok(());
            }
            return Err(StoreError::Conflict(format!("component name {} already used", c.name)));
        }
        if let Some(clash) = self
            .components
            .iter()
            .find(|e| e.key() == c.key() && e.os.versions.overlaps(&c.os.versions))
        {
            return Err(StoreError::Conflict(format!(
                "{} {} overlaps {} {} for key {}",
                c.name,
                c.os.versions,
                clash.name,
                clash.os.versions,
                c.key()
            )));
        }
        let doc = crate::doc::to_canonical_string(&c).map_err(|e| StoreError::Invalid(e.to_string()))?;
        self.backend.put(Namespace::Components, &c.name, doc.as_bytes())?;
        self.components.push(c);
        self.sort();
        Ok(())
    }

    /// Imports every `*.json` component document of a directory, in file
    /// name order.
    pub fn load_dir(&mut self, dir: &Path) -> Result<usize, StoreError> {
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for f in &files {
            let c: TransformationComponent = crate::doc::read_json(f)
                .map_err(|e| StoreError::Invalid(format!("{}: {e}", f.display())))?;
            self.put_component(c)?;
        }
        Ok(files.len())
    }

    pub fn components(&self) -> &[TransformationComponent] {
        &self.components
    }

    pub fn resolve_component(&self, q: &ComponentQuery) -> Result<&TransformationComponent, StoreError> {
        self.components.iter().find(|c| c.matches(q)).ok_or_else(|| StoreError::NotFound {
            what: "transformation component".into(),
            key: q.to_string(),
            hint: self.nearest(q),
        })
    }

    fn nearest(&self, q: &ComponentQuery) -> Option<String> {
        let score = |c: &TransformationComponent| {
            let k = c.key();
            (
                k.kind == q.key.kind && k.subject == q.key.subject,
                k.platform == q.key.platform,
                k.os_platform == q.key.os_platform,
            )
        };
        self.components
            .iter()
            .filter(|c| c.key().kind == q.key.kind)
            .max_by(|a, b| score(a).cmp(&score(b)).then_with(|| b.name.cmp(&a.name)))
            .map(|c| format!("{} {} {}", c.name, c.key(), c.os.versions))
    }

    pub fn put_schema(&mut self, ofm: &OrganisationalFeatureModel) -> Result<(), StoreError> {
        let doc = crate::doc::to_canonical_string(ofm).map_err(|e| StoreError::Invalid(e.to_string()))?;
        self.backend.put(Namespace::Schemas, &ofm.id, doc.as_bytes())
    }

    pub fn schema(&self, id: &str) -> Result<OrganisationalFeatureModel, StoreError> {
        let bytes = self
            .backend
            .get(Namespace::Schemas, id)?
            .ok_or_else(|| StoreError::not_found("schema", id))?;
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
            what: "schema".into(),
            key: id.into(),
            detail: e.to_string(),
        })
    }
}
