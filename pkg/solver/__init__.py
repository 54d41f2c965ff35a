"""
Joint uplink/downlink sub-carrier and power allocation for OFDMA-URLLC MEC systems.
"""
