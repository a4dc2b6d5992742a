# Cross-cutting helpers for the damrs pipeline
