#pragma once

// Builds a small on-disk workspace (manifest, cell stores, embeddings, one pyramid tile).

#include <filesystem>
#include <string>

namespace cellflow::testing {

struct WorkspaceFixture {
  std::filesystem::path root;
  std::filesystem::path manifest;
  int cells_per_slide = 0;

  WorkspaceFixture(const std::string& name, int cells_per_slide, int dim = 16);
  ~WorkspaceFixture();
  WorkspaceFixture(const WorkspaceFixture&) = delete;
  WorkspaceFixture& operator=(const WorkspaceFixture&) = delete;
};

/// Cell ids in the fixture: "<slide>:c<index>", laid out on a 10 px grid, 40 cells per row.
std::string fixture_cell_id(const std::string& slide, int index);

}  // namespace cellflow::testing
