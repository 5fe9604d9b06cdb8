#include "gb0/geometry.hpp"

#include "catch_amalgamated.hpp"

using namespace gb0;

namespace {

CameraModel basic_camera() {
  CameraModel cam;
  cam.fx = cam.fy = 100;
  cam.cx = cam.cy = 32;
  cam.width = cam.height = 64;
  cam.extrinsic = SE3Pose::identity();
  return cam;
}

}  // namespace

TEST_CASE("project: optical-axis point maps to the principal point") {
  auto cam = basic_camera();
  auto p = project({0, 0, 1}, cam);
  CHECK(p.u == Catch::Approx(32.0));
  CHECK(p.v == Catch::Approx(32.0));
  CHECK(p.z == Catch::Approx(1.0));
}

TEST_CASE("project: hand-evaluated pinhole formula") {
  auto cam = basic_camera();
  // u = 100 * 0.1 / 1 + 32 = 42
  auto p = project({0.1, 0, 1}, cam);
  CHECK(p.u == Catch::Approx(42.0));
  CHECK(p.v == Catch::Approx(32.0));
  CHECK(p.z == Catch::Approx(1.0));
}

TEST_CASE("project: point behind the camera") {
  auto cam = basic_camera();
  CHECK_THROWS_AS(project({0, 0, -1}, cam), NonPositiveDepth);
}

TEST_CASE("unproject: inverse of the principal-point example") {
  auto cam = basic_camera();
  Vec3 w = unproject(32, 32, 1.0, cam);
  CHECK(w.x == Catch::Approx(0.0).margin(1e-12));
  CHECK(w.y == Catch::Approx(0.0).margin(1e-12));
  CHECK(w.z == Catch::Approx(1.0));
}

TEST_CASE("unproject: hand inversion x = (u - cx) * z / fx") {
  auto cam = basic_camera();
  Vec3 w = unproject(42, 32, 2.0, cam);
  CHECK(w.x == Catch::Approx(0.2));
  CHECK(w.y == Catch::Approx(0.0).margin(1e-12));
  CHECK(w.z == Catch::Approx(2.0));
}

TEST_CASE("unproject: zero depth rejected") {
  auto cam = basic_camera();
  CHECK_THROWS_AS(unproject(10, 10, 0.0, cam), NonPositiveDepth);
}

TEST_CASE("compose and inverse basics") {
  SE3Pose p;
  p.rotation = Quat::from_axis_angle({0, 0, 1}, 0.7);
  p.translation = {1, 2, 3};

  SE3Pose id = SE3Pose::identity();
  SE3Pose c = compose(id, p);
  CHECK(c.translation.x == Catch::Approx(1.0));
  CHECK(c.rotation.w == Catch::Approx(p.rotation.w));

  SE3Pose inv_id = inverse(id);
  CHECK(inv_id.rotation.w == Catch::Approx(1.0));
  CHECK(inv_id.translation.norm() == Catch::Approx(0.0).margin(1e-15));

  // pure translations compose componentwise
  SE3Pose a = SE3Pose::from_translation({1, 0, 0});
  SE3Pose b = SE3Pose::from_translation({0, 1, 0});
  SE3Pose ab = compose(a, b);
  CHECK(ab.translation.x == Catch::Approx(1.0));
  CHECK(ab.translation.y == Catch::Approx(1.0));
  CHECK(ab.translation.z == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("compose(P, inverse(P)) is identity within 1e-9") {
  Rng rng(77);
  for (int i = 0; i < 200; ++i) {
    SE3Pose p;
    p.rotation = Quat::from_axis_angle(
        {rng.normal(), rng.normal(), rng.normal()}, rng.uniform(-3, 3));
    p.translation = {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
    SE3Pose e = compose(p, inverse(p));
    CHECK(std::abs(e.rotation.w - 1.0) < 1e-9);
    CHECK(std::abs(e.rotation.x) < 1e-9);
    CHECK(e.translation.norm() < 1e-9);
  }
}

TEST_CASE("quaternion norm is re-established after every composition") {
  Rng rng(5);
  SE3Pose p = SE3Pose::identity();
  for (int i = 0; i < 2000; ++i) {
    SE3Pose q;
    q.rotation = Quat::from_axis_angle(
        {rng.normal(), rng.normal(), rng.normal()}, rng.uniform(-3, 3));
    q.translation = {rng.uniform(-1, 1), 0, 0};
    p = compose(p, q);
    CHECK(std::abs(p.rotation.norm() - 1.0) < 1e-9);
  }
}

TEST_CASE("round trip: unproject after project recovers random points") {
  Rng rng(123);
  for (int i = 0; i < 500; ++i) {
    CameraModel cam;
    cam.fx = rng.uniform(40, 300);
    cam.fy = rng.uniform(40, 300);
    cam.width = 64;
    cam.height = 64;
    cam.cx = rng.uniform(0, 63.9);
    cam.cy = rng.uniform(0, 63.9);
    cam.extrinsic.rotation = Quat::from_axis_angle(
        {rng.normal(), rng.normal(), rng.normal()}, rng.uniform(-3, 3));
    cam.extrinsic.translation = {rng.uniform(-1, 1), rng.uniform(-1, 1),
                                 rng.uniform(-1, 1)};
    REQUIRE(cam.valid());

    // pick a point guaranteed in front of the camera
    double z = rng.uniform(0.1, 10.0);
    Vec3 pc{rng.uniform(-0.5, 0.5) * z, rng.uniform(-0.5, 0.5) * z, z};
    Vec3 pw = inverse(cam.extrinsic).apply(pc);

    Projection pr = project(pw, cam);
    Vec3 back = unproject(pr.u, pr.v, pr.z, cam);
    double rel = (back - pw).norm() / std::max(1.0, pw.norm());
    CHECK(rel < 1e-6);

    Projection pr2 = project(back, cam);
    CHECK(std::abs(pr2.u - pr.u) < 1e-6);
    CHECK(std::abs(pr2.v - pr.v) < 1e-6);
    CHECK(std::abs(pr2.z - pr.z) < 1e-6);
  }
}

TEST_CASE("projection is scale-covariant in pixels") {
  auto cam = basic_camera();
  auto cam2 = cam;
  cam2.fx *= 2;
  Rng rng(9);
  for (int i = 0; i < 100; ++i) {
    Vec3 p{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 5)};
    auto a = project(p, cam);
    auto b = project(p, cam2);
    CHECK(b.u - cam2.cx == Catch::Approx(2.0 * (a.u - cam.cx)));
  }
}

TEST_CASE("lookat camera: target projects to image center, +z forward") {
  CameraModel cam = make_lookat_camera({0, -0.6, 0.5}, {0, 0, 0}, 72, 72, 64, 64);
  auto pr = project({0, 0, 0}, cam);
  CHECK(pr.u == Catch::Approx(32.0).margin(1e-9));
  CHECK(pr.v == Catch::Approx(32.0).margin(1e-9));
  CHECK(pr.z == Catch::Approx(std::sqrt(0.6 * 0.6 + 0.5 * 0.5)).margin(1e-9));

  // a point above the target lands higher in the image (smaller v)
  auto above = project({0, 0, 0.1}, cam);
  CHECK(above.v < pr.v);
  // a point to the camera's right (world +x here) lands at larger u
  auto right = project({0.1, 0, 0}, cam);
  CHECK(right.u > pr.u);
}
