#pragma once

#include <robcal/jones.hpp>
#include <robcal/random.hpp>
#include <robcal/simulator.hpp>
#include <robcal/dataset_io.hpp>
#include <robcal/nsca.hpp>
#include <robcal/sca.hpp>
#include <robcal/msca.hpp>
#include <robcal/config.hpp>
#include <robcal/harness.hpp>
