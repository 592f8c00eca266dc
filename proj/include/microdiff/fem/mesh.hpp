#pragma once

// Structured quadratic-triangle meshes over pixel grids.
//
// Every pixel is split into s x s squares and every square into two
// triangles along its lower-left/upper-right diagonal. Quadratic nodes then
// sit on a uniform half-spacing lattice of (2sW + 1) x (2sH + 1) points, so
// node (i, j) has id j * nodes_x + i and coordinates (i, j) / (2s).

#include <array>
#include <vector>

#include <Eigen/Dense>

#include "microdiff/errors.hpp"
#include "microdiff/mnist_data.hpp"

namespace microdiff::fem {

struct Mesh {
  int subdivision = 1;
  int nodes_x = 0;
  int nodes_y = 0;
  double width = 0.0;   // length units, one per pixel
  double height = 0.0;
  std::vector<Eigen::Vector2d> nodes;
  // Corner nodes 0..2 counter-clockwise, then midpoints of edges 01, 12, 20.
  std::vector<std::array<int, 6>> elements;
  std::vector<double> elem_lambda;
  std::vector<double> elem_mu;
  std::vector<int> elem_pixel;
  std::vector<int> bottom_nodes;
  std::vector<int> top_nodes;
  std::vector<int> boundary_nodes;

  [[nodiscard]] int node_count() const { return static_cast<int>(nodes.size()); }
  [[nodiscard]] int element_count() const { return static_cast<int>(elements.size()); }
  [[nodiscard]] int dof_count() const { return 2 * node_count(); }
};

inline Mesh build_mesh(const PropertyField& field, int subdivision) {
  if (subdivision < 1) throw ConfigError("subdivision must be >= 1");
  const int W = field.width();
  const int H = field.height();
  const int s = subdivision;
  Mesh m;
  m.subdivision = s;
  m.width = W;
  m.height = H;
  m.nodes_x = 2 * s * W + 1;
  m.nodes_y = 2 * s * H + 1;
  const double spacing = 1.0 / (2.0 * s);
  m.nodes.reserve(static_cast<std::size_t>(m.nodes_x) * m.nodes_y);
  for (int j = 0; j < m.nodes_y; ++j)
    for (int i = 0; i < m.nodes_x; ++i) m.nodes.emplace_back(i * spacing, j * spacing);

  auto id = [&](int i, int j) { return j * m.nodes_x + i; };
  const auto n_elem = static_cast<std::size_t>(2 * s * s * W * H);
  m.elements.reserve(n_elem);
  m.elem_lambda.reserve(n_elem);
  m.elem_mu.reserve(n_elem);
  m.elem_pixel.reserve(n_elem);
  for (int row = 0; row < H; ++row) {
    // Image row 0 is the top of the domain.
    const int py = H - 1 - row;
    for (int col = 0; col < W; ++col) {
      const int pixel = row * W + col;
      for (int sy = 0; sy < s; ++sy)
        for (int sx = 0; sx < s; ++sx) {
          const int i0 = 2 * (col * s + sx);
          const int j0 = 2 * (py * s + sy);
          const int ll = id(i0, j0), lr = id(i0 + 2, j0), ur = id(i0 + 2, j0 + 2),
                    ul = id(i0, j0 + 2);
          const int bottom_mid = id(i0 + 1, j0), right_mid = id(i0 + 2, j0 + 1),
                    top_mid = id(i0 + 1, j0 + 2), left_mid = id(i0, j0 + 1),
                    centre = id(i0 + 1, j0 + 1);
          m.elements.push_back({ll, lr, ur, bottom_mid, right_mid, centre});
          m.elements.push_back({ll, ur, ul, centre, top_mid, left_mid});
          for (int k = 0; k < 2; ++k) {
            m.elem_lambda.push_back(field.lame_lambda[static_cast<std::size_t>(pixel)]);
            m.elem_mu.push_back(field.lame_mu[static_cast<std::size_t>(pixel)]);
            m.elem_pixel.push_back(pixel);
          }
        }
    }
  }
  for (int i = 0; i < m.nodes_x; ++i) {
    m.bottom_nodes.push_back(id(i, 0));
    m.top_nodes.push_back(id(i, m.nodes_y - 1));
  }
  for (int j = 0; j < m.nodes_y; ++j)
    for (int i = 0; i < m.nodes_x; ++i)
      if (i == 0 || j == 0 || i == m.nodes_x - 1 || j == m.nodes_y - 1)
        m.boundary_nodes.push_back(id(i, j));
  return m;
}

// Reference-configuration Jacobian determinant (twice the signed area).
inline double reference_jacobian(const Mesh& m, int e) {
  const auto& el = m.elements[static_cast<std::size_t>(e)];
  const Eigen::Vector2d a = m.nodes[el[1]] - m.nodes[el[0]];
  const Eigen::Vector2d b = m.nodes[el[2]] - m.nodes[el[0]];
  return a.x() * b.y() - a.y() * b.x();
}

}  // namespace microdiff::fem
